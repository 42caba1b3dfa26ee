"""Sampling-based Shapley estimation with automatic convergence detection.

The estimator regresses sampled subset values on their membership vectors
under the Shapley kernel, with the efficiency constraint enforced at every
checkpoint. Uncertainty comes from the delta method: the solution is an
affine function phi = M u + c of the mean statistic u = s (v(s) - v(0)),
so Cov(phi) ~ M Cov(u) M^T / n. Sampling stops when the largest standard
error falls below `threshold` times the spread of the current estimate.

Paired mode averages each draw with its complement before accumulation,
which cancels odd-order fluctuations and typically reaches the stopping
rule with far fewer evaluations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError
from .exact import Attribution
from .game import CoalitionalGame
from .subsets import shapley_kernel
from .tensorkit.rng import RngState

__all__ = ["KernelShapConfig", "EstimateCheckpoint", "EstimateTrace",
           "kernelshap", "save_trace_csv"]


@dataclass(frozen=True)
class KernelShapConfig:
    batch_size: int = 64          # game evaluations between convergence checks
    paired: bool = True
    threshold: float = 0.1
    max_evaluations: int = 1 << 17
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise UsageError("batch_size must be at least 2")
        if self.threshold <= 0:
            raise UsageError("threshold must be positive")
        if self.max_evaluations < self.batch_size + 2:
            raise UsageError("max_evaluations too small for a single batch")


@dataclass
class EstimateCheckpoint:
    evaluations: int
    phi: np.ndarray
    stderr: np.ndarray
    ratio: float


@dataclass
class EstimateTrace:
    checkpoints: list[EstimateCheckpoint] = field(default_factory=list)
    converged: bool = False
    evaluations: int = 0


def _solve_constrained(a_mat: np.ndarray, u: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Minimize the quadratic with mean statistics (a_mat, u) s.t. sum(phi)=delta.

    Returns (phi, M) where M is the Jacobian d(phi)/d(u) used by the delta
    method. Falls back to the pseudo-inverse while a_mat is still singular.
    """
    d = a_mat.shape[0]
    try:
        inv = np.linalg.inv(a_mat)
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(a_mat)
    ones = np.ones(d)
    inv1 = inv @ ones
    denom = float(ones @ inv1)
    if denom == 0.0 or not np.isfinite(denom):
        m = np.linalg.pinv(a_mat)
        phi = m @ u
        shift = (delta - phi.sum()) / d
        return phi + shift, m
    m = inv - np.outer(inv1, inv1) / denom
    phi = m @ u + inv1 * (delta / denom)
    # enforce efficiency exactly despite floating-point residue
    phi = phi + (delta - phi.sum()) / d
    return phi, m


def kernelshap(game: CoalitionalGame, y: int, config: KernelShapConfig | None = None,
               rng: RngState | None = None) -> tuple[Attribution, EstimateTrace]:
    """Estimate one class's Shapley values until converged or out of budget.

    The evaluation count includes the two anchor calls for v(full), v(empty).
    A run that exhausts max_evaluations returns its best estimate with
    trace.converged False.
    """
    config = config or KernelShapConfig()
    game._check_class(y)
    d = game.d
    dist = shapley_kernel(d)
    gen = (rng or RngState(config.seed)).gen
    v1, v0 = game.grand_and_null(y)
    delta = v1 - v0

    a_sum = np.zeros((d, d))
    u_sum = np.zeros(d)
    uu_sum = np.zeros((d, d))
    n_units = 0
    evaluations = 2
    trace = EstimateTrace()
    pairs = max(1, config.batch_size // 2)

    while evaluations < config.max_evaluations and not trace.converged:
        if config.paired:
            bits = dist.paired_sample_matrix(gen, pairs)
        else:
            bits = dist.sample_matrix(gen, config.batch_size)
        vals = game.evaluate_matrix(bits, y) - v0
        s = bits.astype(np.float64)
        a_rows = s[:, :, None] * s[:, None, :]
        u_rows = s * vals[:, None]
        if config.paired:
            a_rows = 0.5 * (a_rows[0::2] + a_rows[1::2])
            u_rows = 0.5 * (u_rows[0::2] + u_rows[1::2])
        a_sum += a_rows.sum(axis=0)
        u_sum += u_rows.sum(axis=0)
        uu_sum += u_rows.T @ u_rows
        n_units += u_rows.shape[0]
        evaluations += bits.shape[0]

        a_bar = a_sum / n_units
        u_bar = u_sum / n_units
        phi, m = _solve_constrained(a_bar, u_bar, delta)
        if n_units > 1:
            cov_u = (uu_sum - n_units * np.outer(u_bar, u_bar)) / (n_units - 1)
            var_phi = np.einsum("ij,jk,ik->i", m, cov_u, m) / n_units
            stderr = np.sqrt(np.maximum(var_phi, 0.0))
        else:
            stderr = np.full(d, np.inf)
        spread = float(phi.max() - phi.min())
        ratio = float(stderr.max() / max(spread, 1e-12))
        trace.checkpoints.append(EstimateCheckpoint(evaluations, phi.copy(), stderr, ratio))
        trace.converged = ratio < config.threshold

    trace.evaluations = evaluations
    final = trace.checkpoints[-1].phi
    gap = abs(float(final.sum()) - delta)
    att = Attribution(final, "kernelshap", class_index=int(y), efficiency_gap=gap)
    return att, trace


def save_trace_csv(path: str | Path, trace: EstimateTrace) -> None:
    if not trace.checkpoints:
        raise UsageError("trace has no checkpoints to save")
    d = trace.checkpoints[0].phi.shape[0]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["evaluations"]
                        + [f"phi_{i}" for i in range(d)]
                        + [f"stderr_{i}" for i in range(d)])
        for cp in trace.checkpoints:
            writer.writerow([cp.evaluations]
                            + [repr(float(x)) for x in cp.phi]
                            + [repr(float(x)) for x in cp.stderr])
