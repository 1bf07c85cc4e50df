"""AdamW over plain numpy arrays.

The tape forbids in-place mutation of leaves, so `step` returns fresh arrays
and keeps first/second-moment state keyed by parameter index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if len(params) != len(grads):
            raise ValueError("params/grads length mismatch")
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            m = self._m.get(i)
            v = self._v.get(i)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
            self._m[i] = m
            self._v[i] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            out.append(p - cfg.lr * update - cfg.lr * cfg.weight_decay * p)
        return out
