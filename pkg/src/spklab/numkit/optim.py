"""Stochastic gradient descent with classical momentum and weight decay."""

import numpy as np

from .tensor import Tensor


class SgdMomentum:
    """v <- momentum * v + (grad + wd * theta); theta <- theta - lr * v.

    Learning rate is passed per step so schedules stay outside the optimizer.
    """

    def __init__(self, params: dict, momentum: float = 0.9, weight_decay: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        if lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        for k, p in self.params.items():
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all grads so their joint l2 norm is at most max_norm; returns the norm."""
    total = 0.0
    for p in params.values():
        total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            p.grad *= scale
    return norm
