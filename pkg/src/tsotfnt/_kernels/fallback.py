"""Pure numpy transducer forward-backward, vectorized along anti-diagonals."""

from __future__ import annotations

import numpy as np


def _alpha_beta(blank: np.ndarray, label: np.ndarray, T: int, U: int):
    alpha = np.full((T, U + 1), -np.inf)
    beta = np.full((T, U + 1), -np.inf)
    alpha[0, 0] = 0.0
    for n in range(1, T + U):
        t = np.arange(max(0, n - U), min(T - 1, n) + 1)
        u = n - t
        from_blank = np.where(t > 0, alpha[t - 1, u] + blank[t - 1, u], -np.inf)
        from_label = np.where(u > 0, alpha[t, u - 1] + label[t, u - 1], -np.inf)
        alpha[t, u] = np.logaddexp(from_blank, from_label)
    beta[T - 1, U] = blank[T - 1, U]
    for n in range(T + U - 2, -1, -1):
        t = np.arange(max(0, n - U), min(T - 1, n) + 1)
        u = n - t
        tn = np.minimum(t + 1, T - 1)
        un = np.minimum(u + 1, U)
        from_blank = np.where(t < T - 1, beta[tn, u] + blank[t, u], -np.inf)
        from_label = np.where(u < U, beta[t, un] + label[t, u], -np.inf)
        beta[t, u] = np.logaddexp(from_blank, from_label)
    return alpha, beta


def rnnt_forward_backward(blank, label, t_lens, u_lens):
    B, Tm, U1 = blank.shape
    costs = np.zeros(B)
    gb = np.zeros((B, Tm, U1))
    gl = np.zeros((B, Tm, U1))
    for b in range(B):
        T, U = int(t_lens[b]), int(u_lens[b])
        bl = blank[b, :T, :U + 1]
        lb = label[b, :T, :U + 1]
        alpha, beta = _alpha_beta(bl, lb, T, U)
        logz = beta[0, 0]
        costs[b] = -logz
        g = np.zeros((T, U + 1))
        g[:-1] = -np.exp(alpha[:-1] + bl[:-1] + beta[1:] - logz)
        g[-1, U] = -np.exp(alpha[-1, U] + bl[-1, U] - logz)
        gb[b, :T, :U + 1] = g
        if U > 0:
            gl[b, :T, :U] = -np.exp(alpha[:, :U] + lb[:, :U] + beta[:, 1:] - logz)
    return costs, gb, gl
