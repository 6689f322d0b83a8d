"""Optimizers: SGD with momentum for the task pipeline, RMSProp for critics.

Each optimizer owns its parameter list; evaluation-only clones of a network
may be read concurrently, but only the owning optimizer mutates values.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class SGD:
    def __init__(self, params: list[Parameter], lr: float = 0.05, momentum: float = 0.9):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.momentum = momentum
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self._vel):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class RMSProp:
    def __init__(self, params: list[Parameter], lr: float = 5e-5,
                 decay: float = 0.99, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self._ms = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, ms in zip(self.params, self._ms):
            if p.grad is None:
                continue
            ms *= self.decay
            ms += (1.0 - self.decay) * p.grad * p.grad
            p.data -= self.lr * p.grad / (np.sqrt(ms) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def clip_params(params: list[Parameter], bound: float):
    """Clamp every weight into [-bound, bound] in place (W-GAN critic step)."""
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    for p in params:
        np.clip(p.data, -bound, bound, out=p.data)
