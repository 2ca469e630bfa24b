"""AdamW with decoupled weight decay and a warmup + cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

SCHEDULES = ("warmup_cosine", "constant")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class Schedule:
    base_lr: float
    total: int
    warmup: int = 0
    kind: str = "warmup_cosine"


def lr_at(step: int, sched: Schedule) -> float:
    """Linear ramp to ``base_lr`` over ``warmup`` steps, then cosine to 0 at ``total``."""
    if sched.kind == "constant":
        return sched.base_lr
    if sched.warmup > 0 and step < sched.warmup:
        return sched.base_lr * step / sched.warmup
    span = sched.total - sched.warmup
    if span <= 0:
        return sched.base_lr
    frac = min(max((step - sched.warmup) / span, 0.0), 1.0)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)


def adamw_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    sched: Schedule,
    grad_clip: float | None = None,
) -> float:
    """Update ``params`` in place from their ``.grad``; returns the lr used.

    Parameters without a gradient are treated as having a zero gradient.
    """
    state.ensure(params)
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g
    if grad_clip is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > grad_clip:
            scale = grad_clip / (total + 1e-12)
            grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    t = state.step
    lr = lr_at(t, sched)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr
