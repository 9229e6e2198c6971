"""AdamW with decoupled weight decay and a linear warmup / linear decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor


def lr_at(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Learning rate for optimizer step ``step`` (0-based endpoint convention).

    Linear ramp from 0 to ``base_lr`` over ``ceil(warmup_ratio * total_steps)``
    steps, then linear decay to 0 at ``total_steps``.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_ratio * total_steps - 1e-9)
    if step < warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup)


@dataclass
class OptimizerState:
    base_lr: float = 3e-4
    warmup_ratio: float = 0.2
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 1
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("base_lr and eps must be positive, weight_decay non-negative")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
               state: OptimizerState, lr: float | None = None) -> OptimizerState:
    """One AdamW update, in place on ``param.data``.

    ``lr`` defaults to the scheduled rate for this step. Decay is applied to the
    weights directly (``w -= lr * wd * w``) and never enters the moments.
    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    t = state.step_count + 1
    if lr is None:
        lr = lr_at(min(t, state.total_steps), state.total_steps, state.base_lr, state.warmup_ratio)
    b1, b2 = state.betas
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.first_moment[i].shape != p.data.shape:
            raise ValueError(f"shape mismatch for parameter {p.name or i}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {p.name or i}")
        m, v = state.first_moment[i], state.second_moment[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * update
    state.step_count = t
    return state


class AdamW:
    """Thin stateful wrapper used by the training loop."""

    def __init__(self, params: Sequence[Tensor], total_steps: int, base_lr: float = 3e-4,
                 warmup_ratio: float = 0.2, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(base_lr=base_lr, warmup_ratio=warmup_ratio,
                                    weight_decay=weight_decay, betas=tuple(betas), eps=eps,
                                    total_steps=total_steps)

    def current_lr(self) -> float:
        s = self.state
        return lr_at(min(s.step_count + 1, s.total_steps), s.total_steps, s.base_lr, s.warmup_ratio)

    def step(self) -> float:
        lr = self.current_lr()
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr=lr)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
