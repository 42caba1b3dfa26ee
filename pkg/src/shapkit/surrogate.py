"""Distilling a classifier into a surrogate that accepts partial inputs.

Fine-tuning minimizes KL(teacher's full-image prediction || student's
masked prediction) over random uniform-cardinality subsets, so the student
approximates the conditional expectation of the teacher under patch removal.
removal_curve() then quantifies, for several removal semantics, how far a
model's partial-input predictions drift from its own full-input ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorkit as tk
from . import vit
from .errors import TrainingError, UsageError
from .subsets import uniform_cardinality
from .tensorkit import RngState
from .vit import TrainSchedule, ViTWeights

__all__ = ["finetune_surrogate", "RemovalPoint", "removal_curve",
           "save_curve_csv", "REMOVAL_MODES", "kl_rows"]

REMOVAL_MODES = ("pre_softmax", "post_softmax", "zero_input",
                 "zero_embedding", "random_replace")

_CLAMP = 1e-12


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) with clamped logs; nonnegative by construction."""
    pc = np.maximum(p, _CLAMP)
    qc = np.maximum(q, _CLAMP)
    vals = (p * (np.log(pc) - np.log(qc))).sum(axis=-1)
    return np.maximum(vals, 0.0)


def finetune_surrogate(teacher: ViTWeights, train_images: np.ndarray,
                       val_images: np.ndarray, schedule: TrainSchedule,
                       rng: RngState | None = None) -> tuple[ViTWeights, dict]:
    """Returns (student, history); zero epochs returns a bit-exact copy."""
    rng = rng or RngState(0)
    student = teacher.clone()
    params = student.parameters()
    opt = tk.init_optimizer(params, schedule.lr, schedule.weight_decay)
    gen = rng.derive(0).gen
    val_gen_seed = rng.derive(1)
    d = teacher.config.num_patches
    dist = uniform_cardinality(d)
    n = train_images.shape[0]
    teacher_train = vit.infer_probs(teacher, train_images)
    teacher_val = vit.infer_probs(teacher, val_images)
    steps_per_epoch = max(1, (n + schedule.batch_size - 1) // schedule.batch_size)
    total_steps = max(1, schedule.epochs * steps_per_epoch)
    history = {"train_kl": [], "val_kl": []}
    step = 0
    for epoch in range(schedule.epochs):
        order = gen.permutation(n)
        losses = []
        for lo in range(0, n, schedule.batch_size):
            idx = order[lo:lo + schedule.batch_size]
            masks = dist.sample_matrix(gen, len(idx))
            with tk.recording() as rec:
                logits = vit.forward_logits(student, train_images[idx], masks)
                loss = tk.kl_divergence(teacher_train[idx], tk.softmax(logits))
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite distillation loss at step {step}", step=step)
            tk.zero_grads(params)
            tk.backward(loss, rec)
            tk.adamw_step(opt, params, [p.grad for p in params], step / total_steps)
            losses.append(loss.item())
            step += 1
        val_masks = dist.sample_matrix(val_gen_seed.derive(epoch).gen, val_images.shape[0])
        val_probs = vit.infer_probs(student, val_images, val_masks)
        history["train_kl"].append(float(np.mean(losses)))
        history["val_kl"].append(float(kl_rows(teacher_val, val_probs).mean()))
    return student, history


@dataclass
class RemovalPoint:
    fraction: float
    mean_kl: float
    kl_stderr: float
    top1: float


def removal_curve(weights: ViTWeights, images: np.ndarray, labels: np.ndarray,
                  mode: str, fractions, rng: RngState | None = None,
                  donor_images: np.ndarray | None = None) -> list[RemovalPoint]:
    """Prediction drift (KL against the model's own full-image output) and
    top-1 accuracy as a growing random share of patches is removed.

    At fraction 0.0 nothing is removed and the KL is exactly 0 in every mode.
    """
    if mode not in REMOVAL_MODES:
        raise UsageError(f"unknown removal mode {mode!r}; choose from {REMOVAL_MODES}")
    if mode == "random_replace" and donor_images is None:
        raise UsageError("random_replace needs donor images (typically the train split)")
    rng = rng or RngState(0)
    config = weights.config
    d = config.num_patches
    n = images.shape[0]
    labels = np.asarray(labels)
    full_probs = vit.infer_probs(weights, images)
    points = []
    for fi, frac in enumerate(fractions):
        frac = float(frac)
        if not 0.0 <= frac <= 1.0:
            raise UsageError(f"removal fraction {frac} outside [0, 1]")
        remove = int(round(frac * d))
        gen = rng.derive(fi).gen
        retained = np.ones((n, d), dtype=bool)
        for i in range(n):
            if remove:
                retained[i, gen.choice(d, size=remove, replace=False)] = False
        probs = _removed_probs(weights, images, retained, mode, gen, donor_images)
        kls = kl_rows(full_probs, probs)
        stderr = float(kls.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        points.append(RemovalPoint(frac, float(kls.mean()), stderr,
                                   float((probs.argmax(axis=1) == labels).mean())))
    return points


def _removed_probs(weights: ViTWeights, images: np.ndarray, retained: np.ndarray,
                   mode: str, gen: np.random.Generator,
                   donor_images: np.ndarray | None) -> np.ndarray:
    if mode == "pre_softmax":
        return vit.infer_probs(weights, images, retained)
    if mode == "post_softmax":
        return vit.infer_probs(weights, images, retained, attn_post=True)
    if mode == "zero_embedding":
        return vit.infer_probs(weights, images, retained, zero_heldout_tokens=True)
    config = weights.config
    patches = vit.patchify(images, config)
    if mode == "zero_input":
        patches = patches * retained[:, :, None]
    else:  # random_replace
        donors = vit.patchify(donor_images, config)
        patches = patches.copy()
        for i in range(patches.shape[0]):
            removed = np.flatnonzero(~retained[i])
            if removed.size:
                picks = gen.integers(0, donors.shape[0], size=removed.size)
                patches[i, removed] = donors[picks, removed]
    return vit.infer_probs(weights, vit.unpatchify(patches, config))


def save_curve_csv(path: str | Path, points: list[RemovalPoint]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fraction", "mean_kl", "kl_stderr", "top1"])
        for pt in points:
            writer.writerow([repr(pt.fraction), repr(pt.mean_kl),
                             repr(pt.kl_stderr), repr(pt.top1)])
