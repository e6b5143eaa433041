"""A small reverse-mode autodiff over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.
Tracked tensors are never mutated in place.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True
_debug = False


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """When on, every op checks its output for NaN/Inf."""
    global _debug
    _debug = bool(flag)


def is_grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from op {op!r}")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(x, w) -> Tensor:
    """``x[..., n] @ w[n, m]``; ``w`` must be 2-D."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _make(xd @ wd, (x, w), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * v) + 0.5


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def expand_dims(x: Tensor, axis: int) -> Tensor:
    old = x.shape
    return _make(np.expand_dims(x.data, axis), (x,), lambda g: (g.reshape(old),), "expand_dims")


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int, type(None))) or k is Ellipsis for k in parts)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(x.data[key], (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if any(x.shape != xs[0].shape for x in xs):
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in xs]}")
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([x.data for x in xs], axis=axis), xs, bw, "stack")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = _unbroadcast(np.where(mask, g, 0), sa) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0, g), sb) if b.requires_grad else None
        return ga, gb

    return _make(np.where(mask, a.data, b.data), (a, b), bw, "where")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range [0, {table.shape[0]}) "
            f"(got {ids.min()}..{ids.max()})"
        )
    shape, dtype = table.shape, table.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding")


def gather(x: Tensor, ids, axis: int = -1) -> Tensor:
    """``take_along_axis`` with the index broadcast over ``axis``."""
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.put_along_axis(out, ids, g, axis=axis)
        return (out,)

    return _make(np.take_along_axis(x.data, ids, axis=axis), (x,), bw, "gather")


def _lse(v: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = x.data - _lse(x.data, axis)

    def bw(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


def log_sum_exp(x: Tensor, axis: int = -1) -> Tensor:
    lse = _lse(x.data, axis)
    p = np.exp(x.data - lse)
    out = np.squeeze(lse, axis=axis)

    def bw(g):
        return (np.expand_dims(g, axis) * p,)

    return _make(out, (x,), bw, "log_sum_exp")


_scales: dict = {}


def _gate_scale(hid: int, dtype) -> np.ndarray:
    key = (hid, np.dtype(dtype))
    if key not in _scales:
        sc = np.full(4 * hid, 0.5, dtype=dtype)
        sc[2 * hid:3 * hid] = 1.0
        _scales[key] = sc
    return _scales[key]


def _lstm_step(x, h, c, w, b):
    """One LSTM step on raw arrays; shared by the cell and the sequence op so
    both produce bit-identical numbers."""
    hid = h.shape[-1]
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ w + b
    # one tanh for all gates: sigmoid(z) = 0.5 * tanh(z / 2) + 0.5
    th = np.tanh(z * _gate_scale(hid, z.dtype))
    i = 0.5 * th[..., :hid] + 0.5
    f = 0.5 * th[..., hid:2 * hid] + 0.5
    gg = th[..., 2 * hid:3 * hid]
    o = 0.5 * th[..., 3 * hid:] + 0.5
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    return o * tc, c_new, (xh, i, f, gg, o, tc)


def _lstm_dz(dh, dc, c_prev, cache):
    _, i, f, gg, o, tc = cache
    dct = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dct * gg * i * (1.0 - i),
            dct * c_prev * f * (1.0 - f),
            dct * i * (1.0 - gg * gg),
            dh * tc * o * (1.0 - o),
        ],
        axis=-1,
    )
    return dz, dct * f


def _check_lstm(op, n_in, hid, w, b):
    if w.shape != (n_in + hid, 4 * hid) or b.shape != (4 * hid,):
        raise ShapeError(f"{op}: input {n_in}, hidden {hid}, w {w.shape}, b {b.shape}")


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Fused LSTM step.  ``w`` has shape ``(in + hidden, 4 * hidden)`` with gate
    blocks ordered input, forget, candidate, output."""
    n_in, hid = x.shape[-1], h.shape[-1]
    _check_lstm("lstm_cell", n_in, hid, w, b)
    if c.shape != h.shape:
        raise ShapeError(f"lstm_cell: h {h.shape} vs c {c.shape}")
    h_new, c_new, cache = _lstm_step(x.data, h.data, c.data, w.data, b.data)
    cd = c.data

    def bw(g):
        dz, dc_prev = _lstm_dz(g[..., :hid], g[..., hid:], cd, cache)
        xh = cache[0]
        dxh = dz @ w.data.T
        dw = xh.reshape(-1, xh.shape[-1]).T @ dz.reshape(-1, dz.shape[-1]) if w.requires_grad else None
        db = dz.reshape(-1, dz.shape[-1]).sum(axis=0) if b.requires_grad else None
        return dxh[..., :n_in], dxh[..., n_in:], dc_prev, dw, db

    hc = _make(np.concatenate([h_new, c_new], axis=-1), (x, h, c, w, b), bw, "lstm_cell")
    if not hc.requires_grad:
        return Tensor(h_new), Tensor(c_new)
    return getitem(hc, (Ellipsis, slice(0, hid))), getitem(hc, (Ellipsis, slice(hid, None)))


def lstm_layer(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Run an LSTM over ``x`` of shape (B, T, in) from a zero state and return
    the hidden sequence (B, T, hidden).  One graph node, BPTT in backward."""
    B, T, n_in = x.shape
    hid = b.shape[0] // 4
    _check_lstm("lstm_layer", n_in, hid, w, b)
    dtype = x.dtype
    h = np.zeros((B, hid), dtype=dtype)
    c = np.zeros((B, hid), dtype=dtype)
    hs = np.empty((B, T, hid), dtype=dtype)
    caches, cs = [], [c]
    xd, wd, bd = x.data, w.data, b.data
    for t in range(T):
        h, c, cache = _lstm_step(xd[:, t], h, c, wd, bd)
        hs[:, t] = h
        caches.append(cache)
        cs.append(c)

    def bw(g):
        dxh_all = np.empty((B, T, n_in + hid), dtype=dtype)
        dz_all = np.empty((B, T, 4 * hid), dtype=dtype)
        dh_next = np.zeros((B, hid), dtype=dtype)
        dc_next = np.zeros((B, hid), dtype=dtype)
        wt = wd.T
        for t in range(T - 1, -1, -1):
            dz, dc_next = _lstm_dz(g[:, t] + dh_next, dc_next, cs[t], caches[t])
            dxh = dz @ wt
            dh_next = dxh[:, n_in:]
            dxh_all[:, t] = dxh
            dz_all[:, t] = dz
        xh_all = np.stack([cc[0] for cc in caches], axis=1)
        dw = xh_all.reshape(-1, n_in + hid).T @ dz_all.reshape(-1, 4 * hid) if w.requires_grad else None
        db = dz_all.reshape(-1, 4 * hid).sum(axis=0) if b.requires_grad else None
        return dxh_all[..., :n_in], dw, db

    return _make(hs, (x, w, b), bw, "lstm_layer")


def custom(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register an op whose forward was computed outside this module."""
    return _make(data, parents, backward, op)
