"""Faithfulness and localization metrics for patch attributions.

All removal here is game-level: patches leave via the game's own masking
semantics, never by editing pixels (except the retraining curves, which by
definition modify the data and the model).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DatasetSplits
from .errors import UsageError
from .game import CoalitionalGame
from .subsets import fixed_cardinality, uniform_cardinality
from .tensorkit.rng import RngState
from .vit import TrainSchedule, ViTConfig, ViTWeights, accuracy, patchify, train_classifier, unpatchify

__all__ = [
    "InsertionDeletionResult", "insertion_deletion", "CorrelationResult",
    "sensitivity_n", "faithfulness_correlation", "ranking_order",
    "ROAR_STRATEGIES", "roar_curve",
]

ROAR_STRATEGIES = ("surrogate_eval", "masked_eval", "retrain", "retrain_no_pos")


def ranking_order(values: np.ndarray) -> np.ndarray:
    """Indices sorted by descending value; ties break toward lower index."""
    values = np.asarray(values, dtype=np.float64)
    return np.lexsort((np.arange(values.shape[0]), -values))


@dataclass
class InsertionDeletionResult:
    fractions: np.ndarray  # (d+1,)
    curve: np.ndarray      # game values along the path
    auc: float


def insertion_deletion(game: CoalitionalGame, y: int, values: np.ndarray,
                       mode: str = "insertion") -> InsertionDeletionResult:
    """Game value along the ranked insertion (or deletion) path.

    Insertion starts from the empty set and adds patches best first; deletion
    starts from the full set and removes them best first. The curve has d+1
    points at fractions 0/d .. d/d; the AUC is its trapezoidal integral over
    the fraction axis. Faithful rankings give high insertion and low deletion
    AUC.
    """
    if mode not in ("insertion", "deletion"):
        raise UsageError(f"unknown mode {mode!r}")
    d = game.d
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (d,):
        raise UsageError(f"attribution must have shape ({d},)")
    order = ranking_order(values)
    steps = np.zeros((d + 1, d), dtype=bool)
    for j in range(1, d + 1):
        steps[j] = steps[j - 1]
        steps[j, order[j - 1]] = True
    if mode == "deletion":
        steps = ~steps
    curve = game.evaluate_matrix(steps, y)
    fractions = np.arange(d + 1) / d
    return InsertionDeletionResult(fractions, curve, float(np.trapezoid(curve, fractions)))


@dataclass
class CorrelationResult:
    value: float
    defined: bool  # false when either side had (numerically) zero variance


def _pearson(a: np.ndarray, b: np.ndarray) -> CorrelationResult:
    a = a - a.mean()
    b = b - b.mean()
    na = float(np.sqrt((a * a).sum()))
    nb = float(np.sqrt((b * b).sum()))
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1.0)
    if na <= 1e-12 * scale * np.sqrt(a.size) or nb <= 1e-12 * scale * np.sqrt(b.size):
        return CorrelationResult(float("nan"), False)
    return CorrelationResult(float((a * b).sum() / (na * nb)), True)


def _subset_drop_correlation(game: CoalitionalGame, y: int, values: np.ndarray,
                             bits: np.ndarray) -> CorrelationResult:
    values = np.asarray(values, dtype=np.float64)
    v1, _ = game.grand_and_null(y)
    pred = bits.astype(np.float64) @ values
    target = v1 - game.evaluate_matrix(~bits, y)
    return _pearson(pred, target)


def sensitivity_n(game: CoalitionalGame, y: int, values: np.ndarray, n: int,
                  samples: int = 500, rng: RngState | None = None) -> CorrelationResult:
    """Correlation between sum(phi over s) and v(full) - v(full minus s)
    over random subsets s of fixed size n."""
    if not 1 <= n <= game.d:
        raise UsageError(f"subset size n={n} outside 1..{game.d}")
    if samples < 2:
        raise UsageError("need at least two samples for a correlation")
    gen = (rng or RngState(0)).gen
    bits = fixed_cardinality(game.d, n).sample_matrix(gen, samples)
    return _subset_drop_correlation(game, y, values, bits)


def faithfulness_correlation(game: CoalitionalGame, y: int, values: np.ndarray,
                             samples: int = 500,
                             rng: RngState | None = None) -> CorrelationResult:
    """sensitivity across all sizes at once: subsets drawn uniform-cardinality."""
    if samples < 2:
        raise UsageError("need at least two samples for a correlation")
    gen = (rng or RngState(0)).gen
    bits = uniform_cardinality(game.d).sample_matrix(gen, samples)
    return _subset_drop_correlation(game, y, values, bits)


# ---------------------------------------------------------------------------
# retraining-based evaluation


def _drop_topk_masks(attributions: np.ndarray, k: int) -> np.ndarray:
    """(n, d) retained-patch masks after removing each row's top-k patches."""
    n, d = attributions.shape
    retained = np.ones((n, d), dtype=bool)
    if k:
        for i in range(n):
            retained[i, ranking_order(attributions[i])[:k]] = False
    return retained


def _zero_patches(images: np.ndarray, retained: np.ndarray, config: ViTConfig) -> np.ndarray:
    patches = patchify(images, config) * retained[:, :, None]
    return unpatchify(patches, config)


def roar_curve(strategy: str, data: DatasetSplits,
               attributions: dict[str, np.ndarray], k_values,
               evaluator: ViTWeights | None = None,
               model_config: ViTConfig | None = None,
               schedule: TrainSchedule | None = None,
               rng: RngState | None = None) -> list[tuple[int, float]]:
    """Test accuracy after removing each example's k highest-ranked patches.

    Strategies:
      surrogate_eval   mask attention of a partial-input-capable evaluator
      masked_eval      same, with an evaluator trained under random masking
      retrain          zero the pixels and retrain from scratch per k
      retrain_no_pos   as retrain, with positional embeddings disabled

    At k=0 the masking strategies equal the evaluator's plain test accuracy.
    """
    if strategy not in ROAR_STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}; choose from {ROAR_STRATEGIES}")
    if "test" not in attributions:
        raise UsageError("attributions['test'] is required")
    k_values = [int(k) for k in k_values]
    test_att = np.asarray(attributions["test"], dtype=np.float64)
    d = test_att.shape[1]
    if any(k < 0 or k > d for k in k_values):
        raise UsageError(f"k values must lie in 0..{d}")
    test = data.test
    out = []
    if strategy in ("surrogate_eval", "masked_eval"):
        if evaluator is None:
            raise UsageError(f"strategy {strategy!r} needs evaluator weights")
        for k in k_values:
            retained = _drop_topk_masks(test_att, k)
            out.append((k, accuracy(evaluator, test.images, test.labels, retained)))
        return out
    if model_config is None or schedule is None:
        raise UsageError(f"strategy {strategy!r} needs model_config and schedule")
    if "train" not in attributions:
        raise UsageError(f"strategy {strategy!r} needs attributions['train']")
    train_att = np.asarray(attributions["train"], dtype=np.float64)
    rng = rng or RngState(0)
    config = model_config
    if strategy == "retrain_no_pos":
        from dataclasses import replace
        config = replace(config, use_positional=False)
    for j, k in enumerate(k_values):
        train_imgs = _zero_patches(data.train.images, _drop_topk_masks(train_att, k), config)
        test_imgs = _zero_patches(test.images, _drop_topk_masks(test_att, k), config)
        weights, _ = train_classifier(train_imgs, data.train.labels, test_imgs,
                                      test.labels, config, schedule,
                                      masking="none", rng=rng.derive(j))
        out.append((k, accuracy(weights, test_imgs, test.labels)))
    return out
