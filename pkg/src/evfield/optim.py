"""First/second-moment gradient optimizer over lists of numpy arrays."""
from __future__ import annotations

import numpy as np


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm: float | None):
    if max_norm is None:
        return grads
    n = global_norm(grads)
    if n > max_norm and n > 0:
        return [g * (max_norm / n) for g in grads]
    return grads


class Adam:
    """Adam updating the given arrays in place (minimization)."""

    def __init__(self, params, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads, mask=None):
        """One update; ``mask[i] == False`` leaves parameter ``i`` untouched."""
        grads = clip_by_global_norm([np.asarray(g, dtype=np.float64) for g in grads], self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if mask is not None and not mask[i]:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            p -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
