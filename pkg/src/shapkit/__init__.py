"""Shapley-value explanations for small patch transformers with attention
masking: exact solvers, a converging sampler, an amortized explainer, and
numerical verification of the estimation theory connecting them."""

__version__ = "0.1.0"

from . import (analysis, baselines, dataset, estimators, exact, explainer,
               game, metrics, subsets, surrogate, tensorkit, vit)
from .errors import (CapabilityError, DomainError, NumericalError,
                     ShapkitError, TrainingError, UsageError)

__all__ = [
    "analysis", "baselines", "dataset", "estimators", "exact", "explainer",
    "game", "metrics", "subsets", "surrogate", "tensorkit", "vit",
    "ShapkitError", "UsageError", "CapabilityError", "DomainError",
    "NumericalError", "TrainingError", "__version__",
]
