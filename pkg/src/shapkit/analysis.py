"""Numerical verification of the estimation theory behind the explainer.

Two facts are checked end to end:

  * Strong convexity. Under the Shapley kernel the second moment
    A = E[s s^T] equals (a - c) I + c 11^T with closed-form entries, so its
    smallest eigenvalue is a - c = 1 / (2 H(d-1)) with H the harmonic number.
    The expected training loss is 2A-strongly convex, with modulus
    mu = 1 / H(d-1).
  * Error bound. For any efficient attribution, strong convexity turns a
    loss gap into a distance bound:
        E ||phi_hat - phi*||_2  <=  sqrt(2 H(d-1) (L - L*)).
    empirical_sve() measures both sides on a trained explainer with exact
    Shapley values from enumeration and Monte Carlo loss estimates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import vit
from .errors import CapabilityError, UsageError
from .exact import shapley_enumeration_all
from .explainer import ExplainerModel, explain_all
from .game import TabularGame, all_subsets_matrix
from .subsets import shapley_kernel, shapley_kernel_second_moment
from .tensorkit.rng import RngState

__all__ = [
    "harmonic", "strong_convexity_mu", "SecondMomentResult", "second_moment_matrix",
    "BoundResult", "sve_upper_bound", "TheoryReport", "empirical_sve",
    "report_to_json", "save_report",
]

_ENUM_LIMIT = 12


def harmonic(n: int) -> float:
    """H(n) = sum_{k=1..n} 1/k, accumulated smallest term first."""
    if n < 1:
        raise UsageError("harmonic numbers need n >= 1")
    total = 0.0
    for k in range(n, 0, -1):
        total += 1.0 / k
    return total


def strong_convexity_mu(d: int) -> float:
    """Modulus of strong convexity of the expected loss: 1 / H(d-1)."""
    if d < 2:
        raise UsageError("strong convexity modulus needs d >= 2")
    return 1.0 / harmonic(d - 1)


@dataclass
class SecondMomentResult:
    matrix: np.ndarray
    lambda_min: float
    mode: str
    samples: int = 0


def second_moment_matrix(d: int, mode: str = "analytic", samples: int = 0,
                         rng: RngState | None = None,
                         chunk: int = 1 << 15) -> SecondMomentResult:
    """E[s s^T] under the Shapley kernel, closed form or Monte Carlo.

    In analytic mode lambda_min is the exact structural value diag - offdiag;
    in monte_carlo mode it is the smallest eigenvalue of the sampled matrix.
    """
    if d < 2:
        raise UsageError("second moment needs d >= 2")
    if mode == "analytic":
        diag, off = shapley_kernel_second_moment(d)
        mat = np.full((d, d), off)
        np.fill_diagonal(mat, diag)
        return SecondMomentResult(mat, diag - off, "analytic")
    if mode != "monte_carlo":
        raise UsageError(f"unknown mode {mode!r}")
    if samples < 1 or rng is None:
        raise UsageError("monte_carlo mode needs samples >= 1 and an rng")
    dist = shapley_kernel(d)
    gen = rng.gen
    acc = np.zeros((d, d))
    left = samples
    while left > 0:
        take = min(chunk, left)
        s = dist.sample_matrix(gen, take).astype(np.float64)
        acc += s.T @ s
        left -= take
    mat = acc / samples
    lam = float(np.linalg.eigvalsh(mat)[0])
    return SecondMomentResult(mat, lam, "monte_carlo", samples)


@dataclass
class BoundResult:
    value: float
    clamped: bool  # true when the loss gap estimate was negative


def sve_upper_bound(loss: float, optimal_loss: float, d: int) -> BoundResult:
    """sqrt(2 H(d-1) (loss - optimal_loss)), clamped at zero with a flag."""
    if d < 2:
        raise UsageError("the bound needs d >= 2")
    radicand = 2.0 * harmonic(d - 1) * (loss - optimal_loss)
    if radicand < 0.0:
        return BoundResult(0.0, True)
    return BoundResult(float(np.sqrt(radicand)), False)


@dataclass
class TheoryReport:
    sve: float          # mean L2 distance to the exact Shapley vectors
    l_hat: float        # Monte Carlo estimate of the explainer's loss
    l_star_hat: float   # same estimator at the exact Shapley values
    bound: float        # sqrt(2 H(d-1) (l_hat - l_star_hat)), clamped
    slack: float        # 3 standard errors of the loss-gap estimate
    passed: bool        # sve <= bound computed at the +slack loss gap
    clamped: bool
    d: int
    inputs: int
    tuples_per_input: int


def empirical_sve(model: ExplainerModel, images: np.ndarray,
                  tuples_per_input: int = 64, rng: RngState | None = None,
                  exact_phi: np.ndarray | None = None) -> TheoryReport:
    """Measure mean explanation error against its theoretical bound.

    Classes are weighted uniformly per input, matching the training loss.
    Exact values come from full enumeration of each input's surrogate game
    (d <= 12) unless `exact_phi` of shape (n, K, d) is supplied.
    """
    if tuples_per_input < 2:
        raise UsageError("tuples_per_input must be at least 2")
    rng = rng or RngState(0)
    surrogate = model.surrogate
    d = surrogate.config.num_patches
    k = surrogate.config.num_classes
    n = images.shape[0]
    if exact_phi is None and d > _ENUM_LIMIT:
        raise CapabilityError(f"enumeration beyond d={_ENUM_LIMIT} needs precomputed exact_phi")

    bits_all = all_subsets_matrix(d) if exact_phi is None else None
    dist = shapley_kernel(d)
    gen = rng.gen
    phi_hat = explain_all(model, images)  # (n, d, K)

    sve_terms = []
    gap_units = []  # one per (input, subset): class-mean residual^2 difference
    l_model_terms = []
    l_star_terms = []
    for i in range(n):
        tokens = vit.embed_tokens(surrogate, images[i][None])[0]
        if exact_phi is None:
            table = vit.infer_from_tokens(surrogate, tokens, bits_all)
            game = TabularGame(table, d)
            phi_star = shapley_enumeration_all(game)  # (K, d)
            v0 = table[0]
        else:
            phi_star = np.asarray(exact_phi[i], dtype=np.float64)
            v0 = vit.infer_from_tokens(surrogate, tokens,
                                       np.zeros((1, d), dtype=bool))[0]
        for y in range(k):
            sve_terms.append(float(np.linalg.norm(phi_hat[i, :, y] - phi_star[y])))
        sample = dist.sample_matrix(gen, tuples_per_input)
        vals = vit.infer_from_tokens(surrogate, tokens, sample)  # (m, K)
        sf = sample.astype(np.float64)
        resid_model = vals - v0[None, :] - sf @ phi_hat[i]       # (m, K)
        resid_star = vals - v0[None, :] - sf @ phi_star.T
        sq_model = (resid_model ** 2).mean(axis=1)               # class-mean per subset
        sq_star = (resid_star ** 2).mean(axis=1)
        l_model_terms.extend(sq_model.tolist())
        l_star_terms.extend(sq_star.tolist())
        gap_units.extend((sq_model - sq_star).tolist())

    sve = float(np.mean(sve_terms))
    l_hat = float(np.mean(l_model_terms))
    l_star_hat = float(np.mean(l_star_terms))
    gaps = np.asarray(gap_units)
    slack = float(3.0 * gaps.std(ddof=1) / np.sqrt(gaps.size))
    bound = sve_upper_bound(l_hat, l_star_hat, d)
    relaxed = sve_upper_bound(l_hat + slack, l_star_hat, d)
    return TheoryReport(sve=sve, l_hat=l_hat, l_star_hat=l_star_hat,
                        bound=bound.value, slack=slack,
                        passed=bool(sve <= relaxed.value), clamped=bound.clamped,
                        d=d, inputs=n, tuples_per_input=tuples_per_input)


def report_to_json(report: TheoryReport) -> dict:
    return {
        "sve": report.sve,
        "l_hat": report.l_hat,
        "l_star_hat": report.l_star_hat,
        "bound": report.bound,
        "slack": report.slack,
        "pass": report.passed,
        "clamped": report.clamped,
        "d": report.d,
    }


def save_report(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
