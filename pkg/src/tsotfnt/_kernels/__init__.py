"""Lattice kernels: the compiled extension when built, numpy otherwise.

Set ``TSOTFNT_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import fallback

try:
    if os.environ.get("TSOTFNT_PURE_PYTHON"):
        raise ImportError("pure-python mode requested")
    from ._rnnt_cy import rnnt_forward_backward as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"


def rnnt_forward_backward(blank, label, t_lens, u_lens, backend: str | None = None):
    """Per-item transducer costs and their gradients w.r.t. the gathered
    blank and label log-probabilities.

    ``blank[b, t, u]`` is log P(blank | t, u); ``label[b, t, u]`` is
    log P(y_{u+1} | t, u) (column U unused).  Returns ``(costs, d_blank, d_label)``.
    """
    backend = backend or BACKEND
    blank = np.ascontiguousarray(blank, dtype=np.float64)
    label = np.ascontiguousarray(label, dtype=np.float64)
    t_lens = np.ascontiguousarray(t_lens, dtype=np.int64)
    u_lens = np.ascontiguousarray(u_lens, dtype=np.int64)
    if blank.shape != label.shape or blank.ndim != 3:
        raise ValueError(f"blank {blank.shape} and label {label.shape} must match (B, T, U+1)")
    if np.any(t_lens < 1) or np.any(t_lens > blank.shape[1]) or np.any(u_lens < 0) \
            or np.any(u_lens + 1 > blank.shape[2]):
        raise ValueError("sequence lengths out of range for the lattice")
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernel not available")
        return _compiled(blank, label, t_lens, u_lens)
    return fallback.rnnt_forward_backward(blank, label, t_lens, u_lens)
