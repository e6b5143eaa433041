import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsotfnt import numerics as nx
from tsotfnt.numerics import ParamStore, Tensor

PER_OP_TOL = 1e-6


def _store(rng, **shapes):
    ps = ParamStore(np.float64)
    for name, shape in shapes.items():
        ps.add(name, rng.normal(size=shape))
    return ps


def _project(out: Tensor, seed=0) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return nx.sum(nx.mul(out, Tensor(w)))


def _check(f, ps):
    err, per = nx.finite_diff_check(lambda p: _project(f(p)), ps, eps=1e-5)
    assert err < PER_OP_TOL, per


OPS = {
    "add": (dict(a=(3, 4), b=(4,)), lambda p: nx.add(p["a"], p["b"])),
    "sub": (dict(a=(3, 4), b=(3, 1)), lambda p: nx.sub(p["a"], p["b"])),
    "mul": (dict(a=(3, 4), b=(3, 4)), lambda p: nx.mul(p["a"], p["b"])),
    "neg": (dict(a=(5,)), lambda p: nx.neg(p["a"])),
    "scale": (dict(a=(5,)), lambda p: nx.scale(p["a"], 2.5)),
    "matmul": (dict(x=(2, 3, 4), w=(4, 5)), lambda p: nx.matmul(p["x"], p["w"])),
    "linear": (dict(x=(3, 4), w=(4, 2), b=(2,)), lambda p: nx.linear(p["x"], p["w"], p["b"])),
    "tanh": (dict(a=(3, 4)), lambda p: nx.tanh(p["a"])),
    "sigmoid": (dict(a=(3, 4)), lambda p: nx.sigmoid(p["a"])),
    "exp": (dict(a=(3, 4)), lambda p: nx.exp(p["a"])),
    "log": (dict(a=(3, 4)), lambda p: nx.log(nx.exp(p["a"]))),
    "sum_axis": (dict(a=(3, 4)), lambda p: nx.sum(p["a"], axis=1)),
    "mean": (dict(a=(3, 4)), lambda p: nx.expand_dims(nx.mean(p["a"]), 0)),
    "reshape": (dict(a=(3, 4)), lambda p: nx.reshape(p["a"], (2, 6))),
    "getitem": (dict(a=(4, 5)), lambda p: nx.getitem(p["a"], (slice(1, 3), slice(None)))),
    "getitem_fancy": (dict(a=(4, 5)), lambda p: nx.getitem(p["a"], (np.array([0, 0, 2]),))),
    "concat": (dict(a=(2, 3), b=(2, 2)), lambda p: nx.concat([p["a"], p["b"]], axis=-1)),
    "stack": (dict(a=(2, 3), b=(2, 3)), lambda p: nx.stack([p["a"], p["b"]], axis=1)),
    "where": (dict(a=(3, 4), b=(3, 4)),
              lambda p: nx.where(np.arange(12).reshape(3, 4) % 3 == 0, p["a"], p["b"])),
    "embedding": (dict(t=(6, 3)), lambda p: nx.embedding(p["t"], np.array([[0, 5, 0], [2, 2, 1]]))),
    "gather": (dict(a=(2, 3, 5)), lambda p: nx.gather(p["a"], np.array([[[1], [4], [0]], [[3], [3], [2]]]))),
    "log_softmax": (dict(a=(3, 5)), lambda p: nx.log_softmax(p["a"])),
    "log_sum_exp": (dict(a=(3, 5)), lambda p: nx.log_sum_exp(p["a"])),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradient(op):
    shapes, f = OPS[op]
    _check(f, _store(np.random.default_rng(abs(hash(op)) % 1000), **shapes))


def test_lstm_cell_gradient():
    rng = np.random.default_rng(1)
    ps = _store(rng, x=(2, 3), h=(2, 4), c=(2, 4), w=(7, 16), b=(16,))

    def f(p):
        h, c = nx.lstm_cell(p["x"], p["h"], p["c"], p["w"], p["b"])
        return nx.concat([h, c], axis=-1)

    _check(f, ps)


def test_lstm_layer_gradient():
    rng = np.random.default_rng(2)
    ps = _store(rng, x=(2, 4, 3), w=(7, 16), b=(16,))
    _check(lambda p: nx.lstm_layer(p["x"], p["w"], p["b"]), ps)


def test_lstm_three_steps_unrolled():
    rng = np.random.default_rng(3)
    ps = _store(rng, x=(3, 1, 2), w=(5, 12), b=(12,))

    def f(p):
        h = Tensor(np.zeros((1, 3)))
        c = Tensor(np.zeros((1, 3)))
        for t in range(3):
            h, c = nx.lstm_cell(nx.getitem(p["x"], t), h, c, p["w"], p["b"])
        return nx.sum(nx.mul(h, h))

    err, _ = nx.finite_diff_check(f, ps, eps=1e-4)
    assert err < 1e-3


def test_lstm_layer_equals_unrolled_cells():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5, 3))
    w = rng.normal(size=(7, 16))
    b = rng.normal(size=16)
    seq = nx.lstm_layer(Tensor(x), Tensor(w), Tensor(b)).data
    h = Tensor(np.zeros((2, 4)))
    c = Tensor(np.zeros((2, 4)))
    for t in range(5):
        h, c = nx.lstm_cell(Tensor(x[:, t]), h, c, Tensor(w), Tensor(b))
        assert np.array_equal(seq[:, t], h.data)


def test_lstm_zero_everything_gives_zero():
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    h, c = nx.lstm_cell(z(1, 3), z(1, 4), z(1, 4), z(7, 16), z(16))
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_lstm_shape_error():
    with pytest.raises(nx.ShapeError, match="lstm"):
        nx.lstm_cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))),
                     Tensor(np.zeros((6, 16))), Tensor(np.zeros(16)))


def test_log_softmax_uniform_example():
    out = nx.log_softmax(Tensor(np.zeros(4))).data
    assert np.allclose(out, -math.log(4), atol=0, rtol=1e-15)


def test_log_sum_exp_example():
    assert nx.log_sum_exp(Tensor(np.zeros(2))).data == pytest.approx(math.log(2), abs=1e-15)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_log_softmax_normalizes(v):
    out = nx.log_softmax(Tensor(v)).data
    assert np.all(out <= 0)
    assert abs(np.exp(out).sum() - 1) < 1e-6


def test_shape_mismatch_names_op():
    with pytest.raises(nx.ShapeError, match="matmul"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(nx.ShapeError, match="add"):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_trips_on_nan():
    nx.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            nx.log(Tensor(np.array([-1.0])))
    finally:
        nx.set_debug(False)


def test_no_grad_builds_no_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        out = nx.mul(a, a)
    assert out._parents == () or not out.requires_grad


def test_gradient_accumulates_over_reuse():
    a = Tensor(np.array([2.0]), requires_grad=True)
    nx.sum(nx.add(nx.mul(a, a), a)).backward()
    assert a.grad[0] == pytest.approx(5.0)


def test_gradcheck_quadratic():
    ps = ParamStore(np.float64)
    ps.add("x", np.array([1.3]))
    err, _ = nx.finite_diff_check(lambda p: nx.sum(nx.mul(p["x"], p["x"])), ps)
    assert err < 1e-8


def test_gradcheck_constant():
    ps = ParamStore(np.float64)
    ps.add("x", np.array([1.3, -2.0]))
    err, per = nx.finite_diff_check(lambda p: nx.sum(nx.mul(p["x"], Tensor(np.zeros(2)))), ps)
    assert err == 0.0 and per["x"] == 0.0


def test_gradcheck_detects_wrong_gradient():
    ps = ParamStore(np.float64)
    ps.add("x", np.array([0.7, 0.2]))

    def wrong(p):
        x = p["x"]
        return nx.custom(np.array(float(np.sum(x.data ** 3))), (x,), lambda g: (g * x.data,), "wrong")

    err, _ = nx.finite_diff_check(wrong, ps)
    assert err > 0.1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_rejects_non_finite():
    ps = ParamStore(np.float64)
    ps.add("x", np.array([-1.0]))
    with pytest.raises(FloatingPointError):
        nx.finite_diff_check(lambda p: nx.sum(nx.log(p["x"])), ps)


# ------------------------------------------------------------ parameters

def test_uniform_init_bound_and_determinism():
    a = ParamStore()
    b = ParamStore()
    a.add_uniform("w", (50, 20), 50, np.random.default_rng(3))
    b.add_uniform("w", (50, 20), 50, np.random.default_rng(3))
    assert np.array_equal(a["w"].data, b["w"].data)
    assert np.abs(a["w"].data).max() <= 1 / math.sqrt(50)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(5,)),
        "steps": np.array([7], dtype=np.int64),
        "empty": np.zeros((0, 3), dtype=np.float32),
    }
    nx.save_arrays(tmp_path / "c.ckpt", arrays, {"note": "x"})
    back, meta = nx.load_arrays(tmp_path / "c.ckpt")
    assert meta["note"] == "x"
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(nx.CheckpointError):
        nx.load_arrays(tmp_path / "bad")


def test_load_state_dict_lists_all_problems():
    ps = ParamStore()
    ps.add("a", np.zeros((2, 2)))
    ps.add("b", np.zeros(3))
    with pytest.raises(nx.CheckpointError) as e:
        ps.load_state_dict({"a": np.zeros((3, 2)), "c": np.zeros(1)})
    msg = str(e.value)
    assert "a: shape (3, 2) in checkpoint vs (2, 2) in model" in msg and "missing b" in msg and "unexpected c" in msg


def test_schedule_shape():
    s = nx.LinearWarmupDecay(1.0, total=10, warmup=2)
    assert s(0) == pytest.approx(0.5)
    assert s(1) == pytest.approx(1.0)
    assert s(2) == pytest.approx(1.0)
    assert s(10) == pytest.approx(0.0)
    assert all(s(i) >= s(i + 1) for i in range(2, 12))


def test_adamw_minimizes_quadratic():
    ps = ParamStore(np.float64)
    ps.add("x", np.array([3.0, -2.0]))
    opt = nx.AdamW(ps, schedule=nx.LinearWarmupDecay(0.1, 500), weight_decay=0.0)
    for _ in range(500):
        ps.zero_grad()
        nx.sum(nx.mul(ps["x"], ps["x"])).backward()
        opt.step()
    assert np.abs(ps["x"].data).max() < 1e-2


def test_adamw_only_touches_named_params():
    ps = ParamStore(np.float64)
    ps.add("a", np.ones(2))
    ps.add("b", np.ones(2))
    opt = nx.AdamW(ps, ["a"], weight_decay=0.1)
    nx.sum(nx.add(ps["a"], ps["b"])).backward()
    opt.step()
    assert np.array_equal(ps["b"].data, np.ones(2))
    assert not np.array_equal(ps["a"].data, np.ones(2))


def test_clip_norm_bounds_update_direction():
    ps = ParamStore(np.float64)
    ps.add("x", np.zeros(2))
    opt = nx.AdamW(ps, clip_norm=1.0)
    ps["x"].grad = np.array([300.0, 400.0])
    assert opt.grad_norm() == pytest.approx(500.0)
    opt.step()
    assert np.all(np.isfinite(ps["x"].data))
