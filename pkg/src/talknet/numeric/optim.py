import math
from dataclasses import dataclass

import numpy as np


def global_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(params, max_norm=1.0):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    params = list(params)
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


class Adam:
    """Bias-corrected Adam with decoupled weight decay.

    The decay enters as an additive ``lr * weight_decay * theta`` term next to
    the adaptive step, independent of the moment estimates.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-6):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(optimizer, lr):
    """Functional spelling of :meth:`Adam.step`."""
    optimizer.step(lr)


@dataclass
class LrSchedule:
    total_steps: int
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    warmup_fraction: float = 0.02

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")

    @property
    def warmup_steps(self):
        return int(round(self.warmup_fraction * self.total_steps))


def lr_at(schedule, step):
    """Linear warmup from 0 to ``lr_max``, then cosine decay to ``lr_min``."""
    if step >= schedule.total_steps:
        return schedule.lr_min
    step = max(step, 0)
    warm = schedule.warmup_steps
    if step < warm:
        return schedule.lr_max * step / warm
    if step == warm:
        return schedule.lr_max
    progress = (step - warm) / (schedule.total_steps - warm)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + math.cos(math.pi * progress))
