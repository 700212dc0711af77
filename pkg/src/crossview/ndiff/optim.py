from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .tensor import NonFiniteError, Parameter


def lr_schedule(step: int, base_lr: float, decay: float) -> float:
    """Inverse-time decay: base_lr / (1 + decay * step)."""
    if decay < 0:
        raise ValueError(f"lr_schedule: decay must be non-negative, got {decay}")
    if step < 0:
        raise ValueError(f"lr_schedule: step must be non-negative, got {step}")
    return base_lr / (1.0 + decay * step)


@dataclass
class OptimizerState:
    base_lr: float = 0.5
    momentum: float = 0.9
    decay: float = 5e-5
    clip_norm: Optional[float] = 5.0
    step: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.decay < 0:
            raise ValueError(f"decay must be non-negative, got {self.decay}")

    @property
    def lr(self) -> float:
        return lr_schedule(self.step, self.base_lr, self.decay)


def global_norm(params: Iterable[Parameter]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params)))


def sgd_momentum_step(params: Iterable[Parameter], state: OptimizerState) -> float:
    """One update: v <- mu*v + g; theta <- theta - lr(step)*v.

    Gradients are clipped by global norm first (if ``clip_norm`` is set),
    accumulators are zeroed afterwards and the step counter advances.
    Returns the learning rate that was applied.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.id!r}")
    if state.clip_norm is not None:
        norm = global_norm(params)
        if norm > state.clip_norm:
            factor = state.clip_norm / norm
            for p in params:
                p.grad *= p.grad.dtype.type(factor)
    lr = state.lr
    for p in params:
        v = state.buffers.get(p.id)
        if v is None:
            v = state.buffers[p.id] = np.zeros_like(p.value)
        v *= v.dtype.type(state.momentum)
        v += p.grad
        p.value -= v.dtype.type(lr) * v
        p.zero_grad()
    state.step += 1
    return lr
