"""Adam and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .tensor import Parameter

__all__ = ["adam_step", "Adam", "TrainSchedule", "schedule_lr"]


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    step: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update for 1-based ``step``; clears gradients."""
    if step < 1:
        raise ValueError("Adam step index is 1-based")
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p in params:
        g = p.grad
        if g is None:
            continue
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.grad = None


class Adam:
    """Stateful wrapper over :func:`adam_step`; moments start at zero."""

    def __init__(self, params: Iterable[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        for p in self.params:
            p.reset_state()

    def step(self, lr: float) -> None:
        self.t += 1
        adam_step(self.params, lr, self.t, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class TrainSchedule:
    kind: Literal["cosine", "exponential-step"]
    initial_lr: float
    total_steps: int = 0
    decay_factor: float = 0.9
    decay_interval: int = 2

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial learning rate must be positive")
        if self.kind == "cosine" and self.total_steps < 1:
            raise ValueError("cosine schedule needs total_steps >= 1")
        if self.kind not in ("cosine", "exponential-step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def schedule_lr(schedule: TrainSchedule, t: int) -> float:
    """Learning rate at step (cosine) or epoch (exponential-step) ``t``."""
    if t < 0:
        raise ValueError("schedule position must be non-negative")
    if schedule.kind == "cosine":
        if t > schedule.total_steps:
            raise ValueError(f"step {t} beyond cosine horizon {schedule.total_steps}")
        return schedule.initial_lr * 0.5 * (1.0 + math.cos(math.pi * t / schedule.total_steps))
    return schedule.initial_lr * schedule.decay_factor ** (t // schedule.decay_interval)
