"""Parameters, Adam with decoupled weight decay, LR schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientMissing, Tensor


class Parameter(Tensor):
    """A trainable tensor carrying its Adam moment estimates."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 32
    schedule: str = "exponential"  # exponential | cosine | step
    schedule_decay: float = 0.98  # exponential schedule
    milestones: tuple = ()  # step schedule
    seed: int = 0
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in (0, 1): {self.beta1}, {self.beta2}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive: {self.lr}")
        if self.schedule not in ("exponential", "cosine", "step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if any(m < 0 for m in self.milestones):
            raise ValueError(f"milestones must be non-negative: {self.milestones}")

    def lr_at(self, epoch):
        """Learning rate used throughout the given epoch (0-based)."""
        if self.schedule == "exponential":
            return self.lr * self.schedule_decay**epoch
        if self.schedule == "cosine":
            return self.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(self.epochs, 1)))
        if self.schedule == "step":
            drops = sum(1 for m in self.milestones if epoch >= m)
            return self.lr * self.schedule_decay**drops
        raise ValueError(f"unknown schedule {self.schedule!r}")


def adam_step(params, lr_t, config: TrainConfig):
    """Decoupled-weight-decay Adam update with bias correction, in place."""
    b1, b2 = config.beta1, config.beta2
    for p in params:
        if p.grad is None:
            raise GradientMissing("adam_step before any backward pass populated gradients")
        g = p.grad
        p.step += 1
        p.m = b1 * p.m + (1 - b1) * g
        p.v = b2 * p.v + (1 - b2) * g * g
        mhat = p.m / (1 - b1**p.step)
        vhat = p.v / (1 - b2**p.step)
        update = mhat / (np.sqrt(vhat) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * p.data
        p.data -= (lr_t * update).astype(p.data.dtype)


def zero_grads(params):
    for p in params:
        p.grad = None
