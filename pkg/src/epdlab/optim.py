"""Minimal Adam optimizer over flat numpy parameter vectors."""

from __future__ import annotations

import numpy as np


class Adam:
    """Coordinate-wise Adam with bias correction.

    step(params, grad) returns the updated vector; the optimizer keeps its
    moment state, so reuse one instance per parameter block.
    """

    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if grad.shape != self.m.shape or params.shape != self.m.shape:
            raise ValueError(f"expected shape {self.m.shape}, got "
                             f"params {params.shape}, grad {grad.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
