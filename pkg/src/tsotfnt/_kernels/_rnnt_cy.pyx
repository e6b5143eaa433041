# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Transducer lattice forward-backward over gathered blank/label log-probs."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


cdef inline double _lae(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def rnnt_forward_backward(double[:, :, ::1] blank, double[:, :, ::1] label,
                          long[::1] t_lens, long[::1] u_lens):
    cdef Py_ssize_t B = blank.shape[0], T = blank.shape[1], U1 = blank.shape[2]
    costs_np = np.zeros(B, dtype=np.float64)
    gb_np = np.zeros((B, T, U1), dtype=np.float64)
    gl_np = np.zeros((B, T, U1), dtype=np.float64)
    alpha_np = np.empty((T, U1), dtype=np.float64)
    beta_np = np.empty((T, U1), dtype=np.float64)
    cdef double[::1] costs = costs_np
    cdef double[:, :, ::1] gb = gb_np
    cdef double[:, :, ::1] gl = gl_np
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np
    cdef Py_ssize_t b, t, u, Tb, Ub
    cdef double logz
    with nogil:
        for b in range(B):
            Tb = t_lens[b]
            Ub = u_lens[b]
            alpha[0, 0] = 0.0
            for t in range(1, Tb):
                alpha[t, 0] = alpha[t - 1, 0] + blank[b, t - 1, 0]
            for u in range(1, Ub + 1):
                alpha[0, u] = alpha[0, u - 1] + label[b, 0, u - 1]
            for t in range(1, Tb):
                for u in range(1, Ub + 1):
                    alpha[t, u] = _lae(alpha[t - 1, u] + blank[b, t - 1, u],
                                       alpha[t, u - 1] + label[b, t, u - 1])
            beta[Tb - 1, Ub] = blank[b, Tb - 1, Ub]
            for t in range(Tb - 2, -1, -1):
                beta[t, Ub] = beta[t + 1, Ub] + blank[b, t, Ub]
            for u in range(Ub - 1, -1, -1):
                beta[Tb - 1, u] = beta[Tb - 1, u + 1] + label[b, Tb - 1, u]
            for t in range(Tb - 2, -1, -1):
                for u in range(Ub - 1, -1, -1):
                    beta[t, u] = _lae(beta[t + 1, u] + blank[b, t, u],
                                      beta[t, u + 1] + label[b, t, u])
            logz = beta[0, 0]
            costs[b] = -logz
            for t in range(Tb):
                for u in range(Ub + 1):
                    if t < Tb - 1:
                        gb[b, t, u] = -exp(alpha[t, u] + blank[b, t, u] + beta[t + 1, u] - logz)
                    elif u == Ub:
                        gb[b, t, u] = -exp(alpha[t, u] + blank[b, t, u] - logz)
                    if u < Ub:
                        gl[b, t, u] = -exp(alpha[t, u] + label[b, t, u] + beta[t, u + 1] - logz)
    return costs_np, gb_np, gl_np
