"""Adam with decoupled weight decay, and per-epoch learning-rate schedules."""
from __future__ import annotations

import math

import numpy as np

SCHEDULES = ("constant", "cosine", "step")


def scheduled_lr(base_lr, schedule, epoch, epochs):
    """Learning rate for ``epoch`` (0-based) out of ``epochs``."""
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / epochs))
    if schedule == "step":
        factor = 1.0
        if epoch >= 0.5 * epochs:
            factor *= 0.1
        if epoch >= 0.75 * epochs:
            factor *= 0.1
        return base_lr * factor
    raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")


class AdamW:
    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step = np.float32(self.lr / c1)
        for key, p in self.params.items():
            g = p.grad
            m, v = self.m[key], self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= np.float32(1.0 - self.lr * self.weight_decay)
            p.data -= step * m / (np.sqrt(v / np.float32(c2)) + np.float32(self.eps))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
