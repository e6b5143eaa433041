"""Transducer loss, masked LM loss, KL anchor and their combinations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from ._kernels import rnnt_forward_backward
from .numerics import Tensor


@dataclass
class LossConfig:
    lm_weight: float = 0.5  # lambda in L_RNNT + lambda * L_NLL
    kl_weight: float = 1.0  # omega in L_NLL + omega * L_KLD
    kl_direction: str = "orig_to_adapted"  # KL(original || adapted)

    def __post_init__(self):
        if self.lm_weight < 0 or self.kl_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kl_direction not in ("orig_to_adapted", "adapted_to_orig"):
            raise ValueError(f"unknown KL direction {self.kl_direction!r}")


def rnnt_loss(
    lattice: Tensor,
    labels: np.ndarray,
    t_lens: np.ndarray,
    u_lens: np.ndarray,
    blank_id: int,
    reduction: str = "mean",
    backend: str | None = None,
) -> Tensor:
    """Negative log-likelihood of ``labels`` under a normalized lattice.

    ``lattice`` has shape (B, T, U+1, K) holding log-probabilities; ``labels``
    is (B, U) padded with any valid id.  Labels may include ``<cc>``; it is
    just another emitted symbol here.
    """
    lp = lattice.data
    if lp.ndim != 4:
        raise ValueError(f"lattice must be (B, T, U+1, K), got {lp.shape}")
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("rnnt_loss: non-finite lattice")
    B, T, U1, K = lp.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(B, -1)
    if labels.shape[1] != U1 - 1:
        raise ValueError(f"labels width {labels.shape[1]} does not match lattice U+1={U1}")
    lab = np.concatenate([labels, np.zeros((B, 1), dtype=np.int64)], axis=1)
    blank = lp[..., blank_id]
    label = np.take_along_axis(lp, np.broadcast_to(lab[:, None, :, None], (B, T, U1, 1)), axis=3)[..., 0]
    costs, gb, gl = rnnt_forward_backward(blank, label, t_lens, u_lens, backend=backend)
    if reduction == "mean":
        value, w = costs.mean(), 1.0 / B
    elif reduction == "sum":
        value, w = costs.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    dtype = lp.dtype

    def bw(g):
        out = np.zeros(lp.shape, dtype=dtype)
        gl_used = gl * (g * w)
        gl_used[:, :, -1] = 0.0
        idx = np.broadcast_to(lab[:, None, :, None], (B, T, U1, 1))
        np.put_along_axis(out, idx, gl_used[..., None], axis=3)
        out[..., blank_id] += gb * (g * w)
        return (out,)

    return nx.custom(np.asarray(value, dtype=dtype), (lattice,), bw, "rnnt_loss")


MAX_BRUTEFORCE_CELLS = 20


def rnnt_loss_bruteforce(lattice: np.ndarray, labels, blank_id: int) -> float:
    """Enumerate every monotonic alignment of one utterance (test oracle).

    ``lattice`` is (T, U+1, K) log-probabilities for a single item.
    """
    lattice = np.asarray(lattice, dtype=np.float64)
    T, U1, _ = lattice.shape
    U = U1 - 1
    labels = list(labels)
    if len(labels) != U:
        raise ValueError("label length does not match lattice")
    if T * U1 > MAX_BRUTEFORCE_CELLS:
        raise ValueError(f"grid of {T * U1} cells too large for enumeration")
    scores = []
    # the final move is always the blank leaving (T-1, U)
    for label_slots in itertools.combinations(range(T - 1 + U), U):
        t = u = 0
        s = 0.0
        slots = set(label_slots)
        for k in range(T - 1 + U):
            if k in slots:
                s += lattice[t, u, labels[u]]
                u += 1
            else:
                s += lattice[t, u, blank_id]
                t += 1
        s += lattice[T - 1, U, blank_id]
        scores.append(s)
    scores = np.array(scores)
    m = scores.max()
    return float(-(m + np.log(np.exp(scores - m).sum())))


def nll_mask(pred_inputs: np.ndarray, targets: np.ndarray, u_lens: np.ndarray, cc_id: int | None) -> np.ndarray:
    """Boolean (B, U) mask of LM-scored positions.

    Position u scores target ``targets[:, u]`` from the predictor row fed with
    ``pred_inputs[:, u]``.  Padding is always excluded; with ``cc_id`` set,
    rows whose input or target is ``<cc>`` are excluded as well.
    """
    B, U = targets.shape
    mask = np.arange(U)[None, :] < np.asarray(u_lens)[:, None]
    if cc_id is not None:
        mask &= (pred_inputs[:, :U] != cc_id) & (targets != cc_id)
    return mask


def nll_loss(z_v: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over unmasked positions of ``-z_v[b, u, targets[b, u]]``.

    ``z_v`` is (B, U', V) with U' >= U; only the first U rows are read.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    B, U = targets.shape
    width = z_v.shape[-1]
    if np.any(mask & ((targets < 0) | (targets >= width))):
        bad = targets[mask & ((targets < 0) | (targets >= width))]
        raise ValueError(f"nll_loss: unmasked target ids {sorted(set(bad.tolist()))} outside [0, {width})")
    n = int(mask.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=z_v.dtype))
    rows = nx.getitem(z_v, (slice(None), slice(0, U)))
    safe = np.where(mask, targets, 0)
    picked = nx.gather(rows, safe[..., None], axis=-1)[..., 0]
    picked = nx.mul(picked, mask.astype(z_v.dtype))
    return nx.scale(nx.sum(picked), -1.0 / n)


def kl_loss(adapted: Tensor, original: np.ndarray, mask: np.ndarray, direction: str = "orig_to_adapted") -> Tensor:
    """Mean over unmasked rows of KL(original || adapted) by default.

    Both inputs hold log-probabilities of shape (B, U, V); ``original`` is a
    constant.
    """
    original = np.asarray(original)
    if adapted.shape != original.shape:
        raise nx.ShapeError(f"kl_loss: shapes {adapted.shape} and {original.shape}")
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=adapted.dtype))
    w = mask.astype(adapted.dtype)[..., None]
    if direction == "orig_to_adapted":
        p = np.exp(original)
        terms = nx.mul(nx.sub(Tensor(original.astype(adapted.dtype)), adapted), p * w)
    else:
        q = nx.exp(adapted)
        terms = nx.mul(nx.mul(q, nx.sub(adapted, Tensor(original.astype(adapted.dtype)))), w)
    return nx.scale(nx.sum(terms), 1.0 / n)


def fnt_loss(rnnt: Tensor, nll: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.lm_weight == 0:
        return rnnt
    return nx.add(rnnt, nx.scale(nll, cfg.lm_weight))


def adapt_loss(nll: Tensor, kl: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.kl_weight == 0:
        return nll
    return nx.add(nll, nx.scale(kl, cfg.kl_weight))
