from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-4,
    names=None,
) -> tuple[float, dict[str, float]]:
    """Compare reverse-mode gradients of ``f`` against central differences.

    The error for a parameter tensor is ``|g_a - g_n| / max(|g_a|, |g_n|)``
    using L2 norms over the tensor, and 0 when both gradients vanish.
    Returns the worst error and the per-parameter errors.
    """
    names = list(params) if names is None else list(names)
    params.zero_grad()
    out = f(params)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("finite_diff_check: objective is not finite")
    out.backward()
    analytic = {n: (params[n].grad.copy() if params[n].grad is not None
                    else np.zeros_like(params[n].data)) for n in names}
    params.zero_grad()

    errors: dict[str, float] = {}
    for n in names:
        p = params[n]
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gnum = num.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(f(params).data)
            flat[k] = orig - eps
            fm = float(f(params).data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"finite_diff_check: objective not finite at {n}[{k}]")
            gnum[k] = (fp - fm) / (2.0 * eps)
        a = np.linalg.norm(analytic[n])
        b = np.linalg.norm(num)
        denom = max(a, b)
        errors[n] = 0.0 if denom < 1e-12 else float(np.linalg.norm(analytic[n] - num) / denom)
    params.zero_grad()
    return (max(errors.values()) if errors else 0.0), errors
