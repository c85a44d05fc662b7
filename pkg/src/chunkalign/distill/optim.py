"""StableAdamW and the warmup/linear-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import DimensionError, ScheduleError


@dataclass
class OptimizerState:
    """Moments per parameter name plus the shared step counter.

    ``clip_threshold`` bounds the per-tensor ratio RMS(g / sqrt(v_hat))
    before the step size is scaled down; ``math.inf`` turns clipping off.
    """

    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    clip_threshold: float = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def stable_adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
) -> dict[str, np.ndarray]:
    """One StableAdamW update; returns new parameter arrays and advances ``state``.

    A tensor whose squared gradients are large relative to its second
    moment estimate gets its step size divided by ``max(1, RMS / clip)``,
    where ``RMS = sqrt(mean(g**2 / max(v_hat, eps**2)))``.  Weight decay is
    decoupled and uses the same clipped step size.
    """
    if lr < 0:
        raise ValueError(f"lr must be non-negative, got {lr}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        rms = math.sqrt(float(np.mean(g * g / np.maximum(v_hat, state.eps**2))))
        eta = lr / max(1.0, rms / state.clip_threshold)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        out[name] = p - eta * weight_decay * p - eta * update
    return out


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp from 0 to ``peak_lr`` over warmup, then linear decay to 0."""
    if step < 0 or step > total_steps:
        raise ScheduleError(f"step {step} outside schedule [0, {total_steps}]")
    if step <= warmup_steps:
        return peak_lr * step / warmup_steps if warmup_steps else peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)
