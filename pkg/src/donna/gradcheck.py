"""Finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, track_relu_margin

__all__ = ["GradCheckReport", "check_gradients"]


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    relu_margin: float = np.inf
    elements: int = 0

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    The error for each tensor is ``max|analytic - numeric|`` divided by the
    largest gradient magnitude in that tensor, so entries that are
    legitimately near zero do not inflate the ratio. ``relu_margin`` is
    the smallest |pre-activation| any relu saw during the analytic pass;
    callers keep it above the step size.
    """
    named = dict(tensors) if isinstance(tensors, dict) else {f"t{i}": t for i, t in enumerate(tensors)}
    for t in named.values():
        t.grad = None
    with track_relu_margin() as margin:
        loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in named.items()}
    report = GradCheckReport(0.0, relu_margin=float(margin[0]))
    with no_grad():
        for name, t in named.items():
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ValueError(f"{name}: tensor data must be contiguous for perturbation")
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            a = analytic[name]
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
            err = float(np.abs(a - numeric).max(initial=0.0) / scale)
            report.per_tensor[name] = err
            report.max_rel_error = max(report.max_rel_error, err)
            report.elements += flat.size
    for t in named.values():
        t.grad = None
    return report
