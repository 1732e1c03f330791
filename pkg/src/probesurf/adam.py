"""Bias-corrected Adam over named numpy parameters."""
from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.995
EPS = 1e-8


class Adam:
    def __init__(self, beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)

    def step(self, params: dict, grads: dict, lr) -> None:
        """Update ``params`` in place. ``lr`` is a float or a per-name dict.

        Moments restart whenever a parameter changes shape (subdivision, SH
        order increase).
        """
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            rate = lr[name] if isinstance(lr, dict) else lr
            g = np.asarray(g, dtype=np.float64)
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            update = rate * mhat / (np.sqrt(vhat) + self.eps)
            p -= update.astype(p.dtype)

    def state(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}
