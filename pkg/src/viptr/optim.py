"""AdamW with decoupled weight decay, warm-up + cosine schedule, global-norm clipping."""
import math
from dataclasses import dataclass

import numpy as np


@dataclass
class OptimHyper:
    lr_base: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 1
    total_epochs: int = 30
    clip_norm: float = 5.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_base < 0:
            raise ValueError("lr_base must be non-negative")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("warmup_epochs must lie in [0, total_epochs]")


class AdamW:
    def __init__(self, params, hyper: OptimHyper):
        self.params = list(params)
        self.hyper = hyper
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        """One update with learning rate ``lr`` using the gradients currently stored."""
        h = self.hyper
        b1, b2 = h.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if h.weight_decay:
                p.data *= 1.0 - lr * h.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + h.eps)).astype(p.data.dtype)


def adamw_step(params, state, hyper, lr):
    """Functional form: ``state`` is an :class:`AdamW` (created on first use when None)."""
    if state is None:
        state = AdamW(params, hyper)
    state.step(lr)
    return state


def cosine_lr(step, steps_total, warmup_steps, lr_base):
    """Linear warm-up from 0, then half-cosine decay to 0 at ``steps_total``."""
    if warmup_steps and step < warmup_steps:
        return lr_base * step / warmup_steps
    span = max(1, steps_total - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total
