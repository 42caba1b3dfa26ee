"""Exact Shapley values by enumeration and by constrained weighted least squares.

Two independent routes to the same quantity:

  * enumeration: the classical per-player average of marginal contributions,
    weighted by 1/binomial(d-1, |s|), over all 2^(d-1) subsets excluding i;
  * weighted least squares: the unique minimizer of the kernel-weighted
    squared residual (v(s) - v(0) - s.phi)^2 over interior subsets, subject
    to the efficiency constraint sum(phi) = v(full) - v(empty), solved via
    its KKT system with the closed-form second-moment matrix.

Their agreement (tested to 1e-8) is a strong end-to-end check on both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapabilityError, NumericalError, UsageError
from .game import CoalitionalGame, all_subsets_matrix
from .subsets import log_binomial, shapley_kernel, shapley_kernel_second_moment

__all__ = [
    "Attribution", "shapley_enumeration", "shapley_enumeration_all",
    "shapley_wls", "shapley_kernel_loss", "kernel_weighted_system",
    "save_attributions", "load_attributions",
]

_ENUM_LIMIT = 20
_CHUNK = 1 << 16


@dataclass
class Attribution:
    """Per-player scores for one class, plus provenance."""

    values: np.ndarray
    method: str
    class_index: int | None = None
    efficiency_gap: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "class": self.class_index,
            "values": self.values.tolist(),
            "efficiency_gap": self.efficiency_gap,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Attribution":
        try:
            return cls(values=np.asarray(doc["values"], dtype=np.float64),
                       method=str(doc["method"]), class_index=doc.get("class"),
                       efficiency_gap=doc.get("efficiency_gap"))
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"invalid attribution record: {e}") from e


def save_attributions(path: str | Path, attributions) -> None:
    """One JSON object for a single attribution, a JSON array for several."""
    if isinstance(attributions, Attribution):
        attributions = [attributions]
    docs = [a.to_json_dict() for a in attributions]
    payload = docs[0] if len(docs) == 1 else docs
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)
        f.write("\n")


def load_attributions(path: str | Path) -> list[Attribution]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"{path}: invalid attribution file ({e})") from e
    docs = payload if isinstance(payload, list) else [payload]
    return [Attribution.from_json_dict(doc) for doc in docs]


def _check_enumerable(d: int) -> None:
    if d > _ENUM_LIMIT:
        raise CapabilityError(
            f"exact Shapley needs 2^{d} evaluations; refusing beyond d={_ENUM_LIMIT}")


def shapley_enumeration_all(game: CoalitionalGame) -> np.ndarray:
    """(K, d) exact Shapley values for every class at once."""
    d = game.d
    _check_enumerable(d)
    bits = all_subsets_matrix(d)
    values = game.evaluate_matrix_all(bits)  # (2^d, K)
    card = bits.sum(axis=1)
    # weight for a subset of size k not containing i: 1 / (d * C(d-1, k))
    wk = np.exp(-log_binomial(d - 1, np.arange(d))) / d
    phi = np.empty((game.num_classes, d))
    for i in range(d):
        absent = np.flatnonzero(~bits[:, i])
        w = wk[card[absent]]
        delta = values[absent + (1 << i)] - values[absent]
        phi[:, i] = w @ delta
    return phi


def shapley_enumeration(game: CoalitionalGame, y: int) -> Attribution:
    game._check_class(y)
    phi = shapley_enumeration_all(game)[y]
    v1, v0 = game.grand_and_null(y)
    gap = abs(float(phi.sum()) - (v1 - v0))
    return Attribution(phi, "exact", class_index=int(y), efficiency_gap=gap)


def kernel_weighted_system(game: CoalitionalGame, y: int) -> tuple[np.ndarray, np.ndarray, float, float]:
    """(A, b, v1, v0) of the population least-squares problem under the kernel.

    A = E[s s^T] in closed form; b = E[s (v(s) - v(0))] by enumeration.
    """
    d = game.d
    _check_enumerable(d)
    diag, off = shapley_kernel_second_moment(d)
    a_mat = np.full((d, d), off)
    np.fill_diagonal(a_mat, diag)
    pk = shapley_kernel(d).pmf_by_cardinality()
    v1, v0 = game.grand_and_null(y)
    b = np.zeros(d)
    total = 1 << d
    for lo in range(0, total, _CHUNK):
        codes = np.arange(lo, min(lo + _CHUNK, total), dtype=np.uint32)
        bits = (codes[:, None] >> np.arange(d)[None, :]) & 1 > 0
        vals = game.evaluate_matrix(bits, y)
        w = pk[bits.sum(axis=1)] * (vals - v0)
        b += bits.astype(np.float64).T @ w
    return a_mat, b, v1, v0


def shapley_wls(game: CoalitionalGame, y: int) -> Attribution:
    """Solve the efficiency-constrained weighted least squares exactly."""
    d = game.d
    a_mat, b, v1, v0 = kernel_weighted_system(game, y)
    kkt = np.zeros((d + 1, d + 1))
    kkt[:d, :d] = 2.0 * a_mat
    kkt[:d, d] = 1.0
    kkt[d, :d] = 1.0
    rhs = np.concatenate([2.0 * b, [v1 - v0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as e:
        cond = float(np.linalg.cond(kkt))
        raise NumericalError(f"singular KKT system (condition number {cond:.3e})") from e
    if not np.isfinite(sol).all():
        raise NumericalError("KKT solve produced non-finite values")
    phi = sol[:d]
    gap = abs(float(phi.sum()) - (v1 - v0))
    return Attribution(phi, "wls", class_index=int(y), efficiency_gap=gap)


def shapley_kernel_loss(game: CoalitionalGame, y: int, phi: np.ndarray) -> float:
    """Population value of the kernel-weighted squared residual at phi.

    Sum over interior subsets of p(s) (v(s) - v(0) - s.phi)^2; this is the
    objective whose efficient minimizer is the exact Shapley vector.
    """
    d = game.d
    _check_enumerable(d)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if phi.shape[0] != d:
        raise UsageError(f"phi must have length {d}")
    pk = shapley_kernel(d).pmf_by_cardinality()
    _, v0 = game.grand_and_null(y)
    total = 1 << d
    acc = 0.0
    for lo in range(0, total, _CHUNK):
        codes = np.arange(lo, min(lo + _CHUNK, total), dtype=np.uint32)
        bits = (codes[:, None] >> np.arange(d)[None, :]) & 1 > 0
        vals = game.evaluate_matrix(bits, y)
        resid = vals - v0 - bits.astype(np.float64) @ phi
        acc += float((pk[bits.sum(axis=1)] * resid * resid).sum())
    return acc
