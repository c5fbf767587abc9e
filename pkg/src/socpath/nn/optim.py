"""Adam-style optimiser operating on parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


class Adam:
    """First-order update with bias-corrected moment estimates.

    A step whose gradients contain any non-finite value is skipped entirely
    and counted in ``state.skipped``.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float | None = None):
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.state.skipped += 1
            return dict(params)
        lr = self.lr if lr is None else lr
        s = self.state
        s.step += 1
        c1 = 1.0 - self.beta1 ** s.step
        c2 = 1.0 - self.beta2 ** s.step
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = s.m.get(name, np.zeros_like(p))
            v = s.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            s.m[name], s.v[name] = m, v
            out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def sgd_step(params, grads, optimizer: Adam, step_size: float | None = None):
    """Functional wrapper: one optimiser update with an optional step size."""
    return optimizer.step(params, grads, lr=step_size)
