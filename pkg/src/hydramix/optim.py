from __future__ import annotations

import numpy as np


def lr_at(epoch, epochs, lr_start=1e-3, lr_end=1e-5):
    """Per-epoch exponential decay from ``lr_start`` (epoch 0) to ``lr_end`` (last epoch)."""
    if epochs <= 1:
        return lr_start
    if epoch == epochs - 1:
        return lr_end
    return lr_start * (lr_end / lr_start) ** (epoch / (epochs - 1))


class Adam:
    """Adam with bias correction. Moments are kept in float64."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
