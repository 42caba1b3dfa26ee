"""Reference attribution methods the learned explainer is compared against."""

from __future__ import annotations

import warnings

import numpy as np

from . import tensorkit as tk
from . import vit
from .errors import UsageError
from .exact import Attribution
from .game import CoalitionalGame
from .subsets import uniform_cardinality
from .tensorkit import RngState, Tensor
from .vit import ViTWeights

__all__ = ["leave_one_out", "rise", "vanilla_gradient", "attention_last",
           "random_ranking", "BASELINE_METHODS"]

BASELINE_METHODS = ("leave_one_out", "rise", "gradient", "attention_last", "random")


def leave_one_out(game: CoalitionalGame, y: int) -> Attribution:
    """phi_i = v(full) - v(full minus i); exactly d+1 game evaluations."""
    d = game.d
    bits = np.ones((d + 1, d), dtype=bool)
    bits[1:][np.eye(d, dtype=bool)] = False
    vals = game.evaluate_matrix(bits, y)
    return Attribution(vals[0] - vals[1:], "leave_one_out", class_index=int(y))


def rise(game: CoalitionalGame, y: int, samples: int = 2000,
         rng: RngState | None = None) -> Attribution:
    """Mean subset value over random subsets containing each patch.

    Subsets are drawn with uniform cardinality. A patch that no sampled
    subset contains gets score 0 and triggers a warning.
    """
    if samples < 1:
        raise UsageError("rise needs at least one sample")
    gen = (rng or RngState(0)).gen
    bits = uniform_cardinality(game.d).sample_matrix(gen, samples)
    vals = game.evaluate_matrix(bits, y)
    counts = bits.sum(axis=0)
    scores = np.zeros(game.d)
    seen = counts > 0
    scores[seen] = (bits[:, seen] * vals[:, None]).sum(axis=0) / counts[seen]
    if not seen.all():
        missing = np.flatnonzero(~seen).tolist()
        warnings.warn(f"rise: patches {missing} never sampled; scored 0", stacklevel=2)
    return Attribution(scores, "rise", class_index=int(y))


def vanilla_gradient(weights: ViTWeights, image: np.ndarray, y: int) -> Attribution:
    """Per-patch L1 norm of d(prob_y)/d(token embedding) on the full image."""
    config = weights.config
    if not 0 <= y < config.num_classes:
        raise UsageError(f"class {y} outside 0..{config.num_classes - 1}")
    tokens = Tensor(vit.embed_tokens(weights, np.asarray(image)[None]),
                    requires_grad=True)
    with tk.recording() as rec:
        tok = vit._run_blocks(weights, tokens, None)
        probs = tk.softmax(vit.readout_logits(weights, tok, None))
        target = tk.reduce_sum(tk.narrow(probs, 1, int(y), 1))
    tk.backward(target, rec)
    grad = tokens.grad[0]  # (T, h)
    if config.has_class_token:
        grad = grad[1:]
    return Attribution(np.abs(grad).sum(axis=1), "gradient", class_index=int(y))


def attention_last(weights: ViTWeights, image: np.ndarray) -> Attribution:
    """Final-block attention from the class-token query to each patch key,
    summed over heads. Class-agnostic by construction."""
    if not weights.config.has_class_token:
        raise UsageError("attention_last needs a class-token model")
    capture: list[np.ndarray] = []
    vit.forward_tokens(weights, np.asarray(image)[None], None, capture=capture)
    last = capture[-1]  # (1, heads, T, T)
    scores = last[0, :, 0, 1:].sum(axis=0)
    return Attribution(scores, "attention_last", class_index=None)


def random_ranking(d: int, rng: RngState | None = None,
                   repeats: int = 10) -> list[Attribution]:
    """Independent random orderings; metrics averaged over them give the
    chance-level reference."""
    if repeats < 1:
        raise UsageError("repeats must be positive")
    gen = (rng or RngState(0)).gen
    return [Attribution(gen.permutation(d).astype(np.float64), "random")
            for _ in range(repeats)]
