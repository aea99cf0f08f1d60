"""Adam with a step-decay learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from treeground.errors import NumericError, ShapeError
from treeground.numerics.tensor import Tensor


def scheduled_lr(base_lr: float, decay_factor: float, decay_period: int, epoch: int) -> float:
    """``base_lr * decay_factor ** floor(epoch / decay_period)``."""
    if decay_period <= 0:
        raise ValueError("decay_period must be positive")
    return base_lr * decay_factor ** (epoch // decay_period)


@dataclass
class OptimizerState:
    base_lr: float = 5e-5
    decay_factor: float = 0.1
    decay_period: int = 35
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, epoch: int) -> float:
        return scheduled_lr(self.base_lr, self.decay_factor, self.decay_period, epoch)


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor],
                   state: OptimizerState, epoch: int = 0, max_grad_norm: float = 0.0) -> OptimizerState:
    """One Adam update, in place on ``params[name].data`` (arrays are replaced, not mutated).

    Parameters whose gradient is identically zero are skipped, the way a
    parameter that did not take part in the loss is skipped.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"optimizer_step: gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"optimizer_step: {name} has shape {params[name].shape}, gradient {g.shape}")
        if not np.all(np.isfinite(g.data)):
            raise NumericError(f"optimizer_step: non-finite gradient for {name}; step aborted")

    clip = 1.0
    if max_grad_norm > 0:
        total = math.sqrt(sum(float(np.sum(g.data * g.data)) for g in grads.values()))
        if total > max_grad_norm:
            clip = max_grad_norm / total

    state.step += 1
    t = state.step
    lr = state.lr(epoch)
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        gd = g.data * clip if clip != 1.0 else g.data
        if not gd.any():
            continue
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * gd
        v = b2 * v + (1.0 - b2) * gd * gd
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    return state
