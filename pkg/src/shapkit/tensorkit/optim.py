"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from .tensor import Tensor


def cosine_lr(base_lr: float, step_fraction: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * f)); f=0 gives base_lr, f=1 gives 0."""
    if not 0.0 <= step_fraction <= 1.0:
        raise UsageError(f"step_fraction must lie in [0, 1], got {step_fraction}")
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step_fraction))


@dataclass
class OptimizerState:
    """First/second moment buffers plus the shared hyperparameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_optimizer(params: list[Tensor], lr: float, weight_decay: float = 0.0,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adamw_step(state: OptimizerState, params: list[Tensor],
               grads: list[np.ndarray], step_fraction: float) -> None:
    """One in-place AdamW update at cosine-scheduled rate cosine_lr(lr, f).

    Decay is decoupled and scaled by the scheduled rate, so at f=1 (rate 0)
    parameters are exactly unchanged.
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise UsageError("params/grads do not match the optimizer state")
    lr_t = cosine_lr(state.lr, step_fraction)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise UsageError("missing gradient for a parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.weight_decay * p.data
        p.data -= lr_t * update
