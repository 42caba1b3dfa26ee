"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DomainError, UsageError
from .tensor import Tensor, backward, recording


def finite_difference_check(fn: Callable[[Tensor], Tensor], point: Tensor,
                            h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    `fn` must map one tensor to a scalar and be pure. Relative error per
    coordinate is |analytic - fd| / (|fd| + 1e-8); the max over coordinates
    is returned. Non-finite values anywhere raise DomainError.
    """
    if h <= 0:
        raise UsageError("step size h must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    with recording() as rec:
        out = fn(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise UsageError("fn must return a scalar tensor")
    if not np.isfinite(out.data).all():
        raise DomainError("fn returned a non-finite value at the base point")
    backward(out, rec)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    flat = x.data.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(Tensor(x.data.copy())).item()
        flat[i] = orig - h
        lo = fn(Tensor(x.data.copy())).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * h)
    if not np.isfinite(fd).all():
        raise DomainError("finite differences produced non-finite values")

    rel = np.abs(analytic.reshape(-1) - fd) / (np.abs(fd) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
