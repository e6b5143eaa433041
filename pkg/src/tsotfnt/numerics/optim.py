from __future__ import annotations

from typing import Sequence

import numpy as np

from .params import ParamStore


class LinearWarmupDecay:
    """Linear warm-up to ``peak`` over ``warmup`` steps, then linear decay to
    ``final`` at ``total`` steps."""

    def __init__(self, peak: float, total: int, warmup: int = 0, final: float = 0.0):
        self.peak, self.total, self.warmup, self.final = peak, total, warmup, final

    def __call__(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(self.total - self.warmup, 1)
        frac = min(max(step - self.warmup, 0) / span, 1.0)
        return self.peak + (self.final - self.peak) * frac


class AdamW:
    """Adam with decoupled weight decay over a subset of a ParamStore."""

    def __init__(
        self,
        params: ParamStore,
        names: Sequence[str] | None = None,
        schedule=None,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        clip_norm: float | None = 5.0,
    ):
        self.params = params
        self.names = list(names) if names is not None else list(params)
        self.schedule = schedule or (lambda step: 1e-3)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def grad_norm(self) -> float:
        tot = 0.0
        for n in self.names:
            g = self.params[n].grad
            if g is not None:
                tot += float(np.sum(g.astype(np.float64) ** 2))
        return float(np.sqrt(tot))

    def step(self) -> float:
        lr = self.schedule(self.step_count)
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / (norm + 1e-12)
        t = self.step_count + 1
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif scale != 1.0:
                g = g * scale
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(p.data.dtype)
        self.step_count = t
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.names:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        out["adam.step"] = np.array([self.step_count], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays) -> None:
        for n in self.names:
            self.m[n] = np.array(arrays[f"adam.m.{n}"])
            self.v[n] = np.array(arrays[f"adam.v.{n}"])
        self.step_count = int(arrays["adam.step"][0])
