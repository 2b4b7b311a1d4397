"""SGD with momentum, warmup plus decay schedules, and global-norm clipping.

The optimizer owns one velocity buffer per trainable tensor. Schedules are
pure functions of the step index so a training loop can be resumed or
replayed without hidden state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .substrate import DTYPE, Array

SCHEDULES = ("constant", "cosine", "restarts")


def lr_at_step(
    base_lr: float,
    step: int,
    total_steps: int,
    schedule: str = "cosine",
    warmup_ratio: float = 0.1,
) -> float:
    """Learning rate for 0-based ``step`` out of ``total_steps``.

    All schedules share a linear warmup over the first ``warmup_ratio``
    fraction of steps. "cosine" then decays to zero over the remainder;
    "restarts" runs two equal cosine cycles; "constant" holds the base rate.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule: {schedule!r}")
    if not 0.0 <= warmup_ratio < 1.0:
        raise ValueError(f"warmup_ratio {warmup_ratio} outside [0, 1)")
    warmup_steps = int(math.floor(warmup_ratio * total_steps))
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if schedule == "constant":
        return base_lr
    remain = total_steps - warmup_steps
    pos = step - warmup_steps
    if schedule == "cosine":
        frac = pos / max(remain, 1)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    # two equal decay cycles, each starting back at the base rate
    half = max(remain // 2, 1)
    cycle_pos = pos if pos < half else pos - half
    cycle_len = half if pos < half else remain - half
    frac = cycle_pos / max(cycle_len, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_grad_norm(grads: dict[str, Array]) -> float:
    total = 0.0
    for g in grads.values():
        g64 = g.astype(np.float64)
        total += float(np.dot(g64.ravel(), g64.ravel()))
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, Array], max_norm: float = 1.0) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = np.float64(max_norm / norm)
        for name in grads:
            grads[name] = (grads[name].astype(np.float64) * scale).astype(DTYPE)
    return norm


@dataclass
class OptimizerState:
    """Momentum SGD over a flat dict of tensors."""

    momentum: float = 0.9
    nesterov: bool = False
    velocity: dict[str, Array] = field(default_factory=dict)

    def step(self, params: dict[str, Array], grads: dict[str, Array], lr: float) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(g, dtype=np.float64)
            g64 = g.astype(np.float64)
            v = self.momentum * v + g64
            self.velocity[name] = v
            update = g64 + self.momentum * v if self.nesterov else v
            params[name] = (params[name].astype(np.float64) - lr * update).astype(DTYPE)


def sgd_step(
    params: dict[str, Array],
    grads: dict[str, Array],
    state: OptimizerState,
    lr: float,
    max_norm: float = 1.0,
) -> float:
    """Clip, then update in place. Returns the pre-clip gradient norm."""
    norm = clip_global_norm(grads, max_norm)
    state.step(params, grads, lr)
    return norm
