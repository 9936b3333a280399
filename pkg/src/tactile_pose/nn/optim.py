"""Adam optimizer with per-step learning-rate decay."""

from __future__ import annotations

import numpy as np


class Adam:
    """Standard Adam with bias correction.

    The effective learning rate at update step t (counting from 0) is
    lr / (1 + lr_decay * t); bias correction uses the 1-based step count.
    """

    def __init__(self, lr: float = 1e-4, lr_decay: float = 1e-6,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr = lr
        self.lr_decay = lr_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update parameter arrays in place."""
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        lr_t = self.lr / (1.0 + self.lr_decay * self.t)
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr_t * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def adam_step(params, grads, state: Adam) -> None:
    """Functional alias: one Adam update of params given grads."""
    state.step(params, grads)
