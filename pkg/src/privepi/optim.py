"""Adaptive-moment gradient descent over named weight arrays."""

from __future__ import annotations

import numpy as np


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class Adam:
    """Adam with optional clipping of the global gradient norm.

    Weights are updated in place; only keys present in ``grads`` move.
    """

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = 5.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = global_norm(grads)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            g = g * scale
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * self.v[name] + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            weights[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
