import os
import subprocess
import sys

import numpy as np
import pytest

from tsotfnt import _kernels
from tsotfnt._kernels import fallback

needs_compiled = pytest.mark.skipif(_kernels.BACKEND != "cython", reason="compiled kernel not built")


def _inputs(seed, B=3, T=6, U=4, K=5):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(B, T, U + 1, K))
    lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    t_lens = rng.integers(1, T + 1, size=B)
    u_lens = rng.integers(0, U + 1, size=B)
    return lp[..., 0], lp[..., 1], t_lens, u_lens


def _reference(blank, label, T, U):
    """Plain double loop forward recursion."""
    alpha = np.full((T, U + 1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(T):
        for u in range(U + 1):
            if t == 0 and u == 0:
                continue
            a = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else -np.inf
            b = alpha[t, u - 1] + label[t, u - 1] if u > 0 else -np.inf
            alpha[t, u] = np.logaddexp(a, b)
    return -(alpha[T - 1, U] + blank[T - 1, U])


@pytest.mark.parametrize("seed", range(5))
def test_fallback_matches_reference(seed):
    blank, label, t_lens, u_lens = _inputs(seed)
    costs, _, _ = fallback.rnnt_forward_backward(blank, label, t_lens, u_lens)
    for b in range(len(costs)):
        assert costs[b] == pytest.approx(_reference(blank[b], label[b], t_lens[b], u_lens[b]), abs=1e-10)


@needs_compiled
@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    args = _inputs(seed, B=4, T=9, U=7)
    c1, gb1, gl1 = _kernels.rnnt_forward_backward(*args, backend="cython")
    c2, gb2, gl2 = _kernels.rnnt_forward_backward(*args, backend="numpy")
    assert np.allclose(c1, c2, atol=1e-10)
    assert np.allclose(gb1, gb2, atol=1e-10)
    assert np.allclose(gl1, gl2, atol=1e-10)


@pytest.mark.parametrize("backend", ["numpy", pytest.param("cython", marks=needs_compiled)])
def test_gradient_is_occupancy(backend):
    # d cost / d log-prob equals minus the posterior occupancy of the arc, so
    # the blank and label occupancies leaving each diagonal sum to -1
    blank, label, t_lens, u_lens = _inputs(7, B=1, T=5, U=3)
    t_lens[:] = 5
    u_lens[:] = 3
    _, gb, gl = _kernels.rnnt_forward_backward(blank, label, t_lens, u_lens, backend=backend)
    gl[..., -1] = 0
    assert np.all(gb <= 1e-12) and np.all(gl <= 1e-12)
    assert gb.sum() == pytest.approx(-5.0, abs=1e-9)
    assert gl.sum() == pytest.approx(-3.0, abs=1e-9)


@pytest.mark.parametrize("backend", ["numpy", pytest.param("cython", marks=needs_compiled)])
def test_padding_gets_no_gradient(backend):
    blank, label, _, _ = _inputs(8, B=1, T=6, U=4)
    _, gb, gl = _kernels.rnnt_forward_backward(blank, label, np.array([3]), np.array([2]), backend=backend)
    assert np.all(gb[0, 3:] == 0) and np.all(gb[0, :, 3:] == 0)
    assert np.all(gl[0, 3:] == 0) and np.all(gl[0, :, 2:] == 0)


def test_length_validation():
    blank, label, _, _ = _inputs(9, B=1, T=3, U=2)
    with pytest.raises(ValueError):
        _kernels.rnnt_forward_backward(blank, label, np.array([4]), np.array([1]))
    with pytest.raises(ValueError):
        _kernels.rnnt_forward_backward(blank, label, np.array([0]), np.array([1]))


def test_backend_name():
    assert _kernels.BACKEND in ("cython", "numpy")


@pytest.mark.parametrize("value, expected", [("1", "numpy"), ("", None)])
def test_env_var_selects_backend(value, expected):
    env = {**os.environ, "TSOTFNT_PURE_PYTHON": value}
    out = subprocess.run([sys.executable, "-c", "from tsotfnt import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True).stdout.strip()
    assert out == (expected or _kernels.BACKEND)
