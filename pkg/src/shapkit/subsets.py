"""Subset distributions over {0,1}^d and cardinality-first sampling.

Supported families (all exchangeable: probability depends only on |s|):
  * shapley_kernel      mass(k) proportional to 1/(k(d-k)) on 1..d-1
  * uniform_cardinality mass(k) = 1/(d+1) on 0..d
  * fixed_cardinality   point mass at one k

Sampling draws a cardinality from the mass vector, then a uniform subset of
that size via a partial Fisher-Yates shuffle of 0..d-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import UsageError
from .game import Subset

__all__ = [
    "SubsetDistribution", "shapley_kernel", "uniform_cardinality",
    "fixed_cardinality", "log_binomial", "shapley_kernel_second_moment",
]


def log_binomial(d: int, k) -> np.ndarray | float:
    """log C(d, k) via log-gamma; vectorized over k."""
    k = np.asarray(k, dtype=np.float64)
    out = gammaln(d + 1.0) - gammaln(k + 1.0) - gammaln(d - k + 1.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class SubsetDistribution:
    """An exchangeable distribution on subsets, stored as cardinality mass."""

    d: int
    kind: str
    cardinality_mass: np.ndarray = field(repr=False)

    def __post_init__(self):
        mass = np.asarray(self.cardinality_mass, dtype=np.float64)
        if mass.shape != (self.d + 1,):
            raise UsageError("cardinality mass must have length d+1")
        if (mass < 0).any() or abs(mass.sum() - 1.0) > 1e-12:
            raise UsageError("cardinality mass must be a probability vector")
        object.__setattr__(self, "cardinality_mass", mass)

    def pmf_by_cardinality(self) -> np.ndarray:
        """Probability of each individual subset, indexed by its cardinality."""
        ks = np.arange(self.d + 1)
        return self.cardinality_mass * np.exp(-log_binomial(self.d, ks))

    def pmf(self, s: Subset) -> float:
        if s.d != self.d:
            raise UsageError(f"subset has d={s.d}, distribution has d={self.d}")
        return float(self.pmf_by_cardinality()[s.cardinality])

    def is_complement_symmetric(self) -> bool:
        return bool(np.array_equal(self.cardinality_mass, self.cardinality_mass[::-1]))

    def sample_matrix(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """(count, d) boolean matrix of independent draws."""
        if count < 0:
            raise UsageError("count must be nonnegative")
        d = self.d
        bits = np.zeros((count, d), dtype=bool)
        if count == 0:
            return bits
        ks = rng.choice(d + 1, size=count, p=self.cardinality_mass)
        kmax = int(ks.max())
        perm = np.tile(np.arange(d), (count, 1))
        rows = np.arange(count)
        for j in range(kmax):
            # swap position j with a uniform position in [j, d)
            pick = j + (rng.random(count) * (d - j)).astype(np.int64)
            pj = perm[rows, j].copy()
            perm[rows, j] = perm[rows, pick]
            perm[rows, pick] = pj
        colmask = np.arange(d)[None, :] < ks[:, None]
        bits[np.repeat(rows, ks), perm[colmask]] = True
        return bits

    def sample(self, rng: np.random.Generator, count: int) -> list[Subset]:
        return [Subset(row) for row in self.sample_matrix(rng, count)]

    def paired_sample_matrix(self, rng: np.random.Generator, pairs: int) -> np.ndarray:
        """(2*pairs, d) matrix of (draw, complement) pairs, interleaved.

        Valid only for complement-symmetric distributions, where the
        complement of a draw has the same marginal law as the draw itself.
        """
        if not self.is_complement_symmetric():
            raise UsageError(f"{self.kind} distribution is not complement-symmetric")
        half = self.sample_matrix(rng, pairs)
        out = np.empty((2 * pairs, self.d), dtype=bool)
        out[0::2] = half
        out[1::2] = ~half
        return out

    def paired_sample(self, rng: np.random.Generator, pairs: int) -> list[tuple[Subset, Subset]]:
        m = self.paired_sample_matrix(rng, pairs)
        return [(Subset(m[2 * i]), Subset(m[2 * i + 1])) for i in range(pairs)]


def shapley_kernel(d: int) -> SubsetDistribution:
    """Cardinality mass proportional to 1/(k(d-k)); zero at the empty and full sets."""
    if d < 2:
        raise UsageError("shapley_kernel needs d >= 2")
    mass = np.zeros(d + 1)
    ks = np.arange(1, d)
    mass[1:d] = 1.0 / (ks * (d - ks))
    mass /= mass.sum()
    return SubsetDistribution(d, "shapley_kernel", mass)


def uniform_cardinality(d: int) -> SubsetDistribution:
    if d < 1:
        raise UsageError("uniform_cardinality needs d >= 1")
    mass = np.full(d + 1, 1.0 / (d + 1))
    return SubsetDistribution(d, "uniform_cardinality", mass)


def fixed_cardinality(d: int, n: int) -> SubsetDistribution:
    if not 0 <= n <= d:
        raise UsageError(f"fixed cardinality n={n} outside 0..{d}")
    mass = np.zeros(d + 1)
    mass[n] = 1.0
    return SubsetDistribution(d, "fixed_cardinality", mass)


def shapley_kernel_second_moment(d: int) -> tuple[float, float]:
    """Closed-form (diagonal, off-diagonal) entries of E[s s^T] under the kernel.

    With mass m(k) on cardinalities, exchangeability gives
      E[s_i s_i] = sum_k m(k) k/d
      E[s_i s_j] = sum_k m(k) k(k-1)/(d(d-1))   for i != j.
    """
    mass = shapley_kernel(d).cardinality_mass
    ks = np.arange(d + 1, dtype=np.float64)
    diag = float((mass * ks / d).sum())
    off = float((mass * ks * (ks - 1.0) / (d * (d - 1.0))).sum())
    return diag, off
