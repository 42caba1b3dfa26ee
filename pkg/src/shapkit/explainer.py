"""Amortized Shapley explainer: one forward pass emits all per-class values.

The explainer reuses the surrogate's transformer trunk, adds one fresh
attention block, and maps each patch token through three fully connected
layers (width 4h) to K per-class scores; the class-token position is
computed and discarded. A tanh keeps raw outputs bounded, and an additive
shift then distributes any efficiency residue equally across patches:

    phi <- phi + (v(full) - v(empty) - sum(phi)) / d

which is the L2 projection onto the efficiency plane and is idempotent.
Training regresses, through that projection, sampled subset values of the
surrogate game onto s . phi, with subsets drawn from the Shapley kernel;
at the minimizer the output is the game's exact Shapley vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorkit as tk
from . import vit
from .errors import TrainingError, UsageError
from .game import CoalitionalGame
from .subsets import shapley_kernel
from .tensorkit import RngState, Tensor
from .vit import BlockWeights, ViTConfig, ViTWeights

__all__ = [
    "ExplainerHead", "ExplainerModel", "ExplainerTrainConfig", "ValidationTuple",
    "init_explainer", "normalize_efficient", "explain", "explain_all",
    "subset_residual_loss", "explainer_loss", "build_validation_tuples",
    "validation_loss", "train_explainer", "save_explainer", "load_explainer",
]

HEAD_KIND = "extra_attn+3fc"


@dataclass
class ExplainerHead:
    """One extra attention block plus a 3-layer per-token MLP of width 4h."""

    block: BlockWeights
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    fc3_w: Tensor
    fc3_b: Tensor

    def named(self, prefix: str = "head"):
        yield from self.block.named(f"{prefix}.block")
        for name in ("fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class ExplainerModel:
    """Trainable trunk+head, and the frozen surrogate that defines the game."""

    backbone: ViTWeights
    head: ExplainerHead
    surrogate: ViTWeights
    use_tanh: bool = True

    @property
    def config(self) -> ViTConfig:
        return self.backbone.config

    def named_parameters(self):
        for name, t in self.backbone.named_parameters():
            yield f"backbone.{name}", t
        yield from self.head.named()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def clone(self) -> "ExplainerModel":
        bb = self.backbone.clone()
        src = dict(self.head.named())

        def cp(name: str) -> Tensor:
            t = src[f"head.{name}"]
            return Tensor(t.data.copy(), requires_grad=True)

        block = BlockWeights(*(cp(f"block.{f}") for f in (
            "ln1_g", "ln1_b", "qkv_w", "proj_w", "ln2_g", "ln2_b",
            "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")))
        head = ExplainerHead(block, cp("fc1_w"), cp("fc1_b"), cp("fc2_w"),
                             cp("fc2_b"), cp("fc3_w"), cp("fc3_b"))
        return ExplainerModel(bb, head, self.surrogate, self.use_tanh)


def _init_head(config: ViTConfig, rng: RngState) -> ExplainerHead:
    g = rng.gen
    h = config.embed_dim
    k = config.num_classes
    block = BlockWeights(
        ln1_g=Tensor(np.ones(h), requires_grad=True),
        ln1_b=Tensor(np.zeros(h), requires_grad=True),
        qkv_w=Tensor(g.normal(0, h ** -0.5, (h, 3 * h)), requires_grad=True),
        proj_w=Tensor(g.normal(0, h ** -0.5, (h, h)), requires_grad=True),
        ln2_g=Tensor(np.ones(h), requires_grad=True),
        ln2_b=Tensor(np.zeros(h), requires_grad=True),
        mlp_w1=Tensor(g.normal(0, h ** -0.5, (h, 4 * h)), requires_grad=True),
        mlp_b1=Tensor(np.zeros(4 * h), requires_grad=True),
        mlp_w2=Tensor(g.normal(0, (4 * h) ** -0.5, (4 * h, h)), requires_grad=True),
        mlp_b2=Tensor(np.zeros(h), requires_grad=True),
    )
    # Zero final layer: the initial raw output is 0, so after normalization
    # the explainer starts from the uniform efficient attribution delta/d.
    return ExplainerHead(
        block,
        fc1_w=Tensor(g.normal(0, h ** -0.5, (h, 4 * h)), requires_grad=True),
        fc1_b=Tensor(np.zeros(4 * h), requires_grad=True),
        fc2_w=Tensor(g.normal(0, (4 * h) ** -0.5, (4 * h, 4 * h)), requires_grad=True),
        fc2_b=Tensor(np.zeros(4 * h), requires_grad=True),
        fc3_w=Tensor(np.zeros((4 * h, k)), requires_grad=True),
        fc3_b=Tensor(np.zeros(k), requires_grad=True),
    )


def init_explainer(surrogate: ViTWeights, rng: RngState,
                   init_from: str = "surrogate", use_tanh: bool = True) -> ExplainerModel:
    """init_from='surrogate' copies the trunk (default); 'random' starts fresh."""
    if init_from not in ("surrogate", "random"):
        raise UsageError(f"unknown init_from {init_from!r}")
    if init_from == "surrogate":
        backbone = surrogate.clone()
        backbone.head_w = None
        backbone.head_b = None
    else:
        backbone = vit.init_classifier_weights(surrogate.config, rng.derive(0), with_head=False)
    head = _init_head(surrogate.config, rng.derive(1))
    return ExplainerModel(backbone, head, surrogate.clone(), use_tanh)


# ---------------------------------------------------------------------------
# forward


def _forward_raw(model: ExplainerModel, images: np.ndarray) -> Tensor:
    """(B, d, K) unnormalized per-patch scores; explainer sees the full image."""
    config = model.config
    tok = vit.forward_tokens(model.backbone, images)
    km = np.ones((tok.shape[0], config.num_tokens), dtype=bool)
    tok = vit._block(model.head.block, tok, km, config, attn_post=False, capture=None)
    hid = tk.gelu(tk.add(tk.matmul(tok, model.head.fc1_w), model.head.fc1_b))
    hid = tk.gelu(tk.add(tk.matmul(hid, model.head.fc2_w), model.head.fc2_b))
    raw = tk.add(tk.matmul(hid, model.head.fc3_w), model.head.fc3_b)
    if model.use_tanh:
        raw = tk.tanh(raw)
    if config.has_class_token:
        raw = tk.narrow(raw, 1, 1, config.num_patches)  # discard the class position
    return raw


def normalize_efficient(raw: np.ndarray, grand_minus_null: np.ndarray) -> np.ndarray:
    """Additive projection onto the efficiency plane (idempotent).

    raw: (..., d, K) scores; grand_minus_null: (..., K) targets for the sum.
    """
    raw = np.asarray(raw, dtype=np.float64)
    delta = np.asarray(grand_minus_null, dtype=np.float64)
    d = raw.shape[-2]
    gap = delta - raw.sum(axis=-2)
    return raw + gap[..., None, :] / d


def _normalize_efficient_t(raw: Tensor, delta: np.ndarray) -> Tensor:
    """Tensor version of normalize_efficient; gradients flow through the shift."""
    d = raw.shape[-2]
    sums = tk.reduce_sum(raw, axis=raw.ndim - 2, keepdims=True)
    gap = tk.sub(Tensor(delta[..., None, :]), sums)
    return tk.add(raw, tk.scale(gap, 1.0 / d))


def _grand_null_probs(surrogate: ViTWeights, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = surrogate.config.num_patches
    n = images.shape[0]
    full = vit.infer_probs(surrogate, images, np.ones((n, d), dtype=bool))
    null = vit.infer_probs(surrogate, images, np.zeros((n, d), dtype=bool))
    return full, null


def explain_all(model: ExplainerModel, images: np.ndarray) -> np.ndarray:
    """(B, d, K) efficient attributions for a batch, one forward pass each."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    raw = _forward_raw(model, images).data
    full, null = _grand_null_probs(model.surrogate, images)
    return normalize_efficient(raw, full - null)


def explain(model: ExplainerModel, image: np.ndarray, class_index: int | None = None) -> np.ndarray:
    """(d, K) attributions for one image, or (d,) for a single class."""
    phi = explain_all(model, image)[0]
    if class_index is None:
        return phi
    if not 0 <= class_index < model.config.num_classes:
        raise UsageError(f"class {class_index} outside 0..{model.config.num_classes - 1}")
    return phi[:, class_index]


# ---------------------------------------------------------------------------
# losses


def subset_residual_loss(phi: np.ndarray, game: CoalitionalGame, y: int,
                         bits: np.ndarray, weights: np.ndarray | None = None) -> float:
    """(Weighted) mean of (v(s) - v(empty) - s.phi)^2 over the given subsets.

    With weights equal to the kernel probabilities over all interior subsets
    this is the population objective minimized exactly by the Shapley vector.
    """
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    bits = np.asarray(bits, dtype=bool)
    vals = game.evaluate_matrix(bits, y)
    _, v0 = game.grand_and_null(y)
    resid = vals - v0 - bits.astype(np.float64) @ phi
    sq = resid * resid
    if weights is None:
        return float(sq.mean())
    weights = np.asarray(weights, dtype=np.float64)
    return float((weights * sq).sum() / weights.sum())


def explainer_loss(model: ExplainerModel, game: CoalitionalGame, image: np.ndarray,
                   y: int, subsets) -> float:
    """Monte Carlo value of the training objective for one (image, class)."""
    game._check_class(y)
    bits = np.stack([s.bits for s in subsets]) if not isinstance(subsets, np.ndarray) \
        else np.asarray(subsets, dtype=bool)
    phi = explain(model, image, class_index=y)
    return subset_residual_loss(phi, game, y, bits)


def _batch_loss(model: ExplainerModel, images: np.ndarray, bits: np.ndarray,
                targets: np.ndarray, null: np.ndarray, delta: np.ndarray) -> Tensor:
    """Squared-residual loss over (example, subset, class) triples.

    bits: (B, m, d); targets: (B, m, K) subset values; null/delta: (B, K).
    """
    raw = _forward_raw(model, images)
    phi = _normalize_efficient_t(raw, delta)           # (B, d, K)
    pred = tk.matmul(Tensor(bits.astype(np.float64)), phi)  # (B, m, K)
    return tk.squared_error(pred, Tensor(targets - null[:, None, :]))


# ---------------------------------------------------------------------------
# validation tuples


@dataclass(frozen=True)
class ValidationTuple:
    """A cached (example, class, subset) regression target."""

    example_index: int
    class_index: int
    bits: np.ndarray
    value: float        # v_xy(s)
    null_value: float   # v_xy(empty)
    grand_value: float  # v_xy(full)

    def __post_init__(self):
        k = int(np.asarray(self.bits).sum())
        if k == 0 or k == np.asarray(self.bits).shape[0]:
            raise UsageError("validation tuples must use interior subsets "
                             "(neither empty nor full)")


def build_validation_tuples(surrogate: ViTWeights, images: np.ndarray,
                            per_example: int, rng: RngState) -> list[ValidationTuple]:
    """Sample kernel-distributed subsets per image and cache game values for
    every class; the resulting mean residual is an unbiased loss estimate."""
    if per_example < 1:
        raise UsageError("per_example must be positive")
    d = surrogate.config.num_patches
    k = surrogate.config.num_classes
    dist = shapley_kernel(d)
    gen = rng.gen
    full, null = _grand_null_probs(surrogate, images)
    tuples = []
    for i in range(images.shape[0]):
        bits = dist.sample_matrix(gen, per_example)
        tokens = vit.embed_tokens(surrogate, images[i][None])[0]
        vals = vit.infer_from_tokens(surrogate, tokens, bits)  # (m, K)
        for j in range(per_example):
            for y in range(k):
                tuples.append(ValidationTuple(i, y, bits[j].copy(),
                                              float(vals[j, y]),
                                              float(null[i, y]), float(full[i, y])))
    return tuples


def validation_loss(model: ExplainerModel, images: np.ndarray,
                    tuples: list[ValidationTuple]) -> float:
    """Mean squared residual of the current explainer over cached tuples."""
    if not tuples:
        raise UsageError("no validation tuples supplied")
    needed = sorted({t.example_index for t in tuples})
    phi = explain_all(model, images[needed])
    row = {ex: r for r, ex in enumerate(needed)}
    total = 0.0
    for t in tuples:
        pred = float(t.bits.astype(np.float64) @ phi[row[t.example_index], :, t.class_index])
        resid = t.value - t.null_value - pred
        total += resid * resid
    return total / len(tuples)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class ExplainerTrainConfig:
    epochs: int
    batch_size: int = 32
    subsets_per_example: int = 16
    paired: bool = True
    lr: float = 1e-3
    weight_decay: float = 0.0
    val_subsets_per_example: int = 8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise UsageError("invalid explainer training config")
        if self.subsets_per_example < 1:
            raise UsageError("subsets_per_example must be positive")
        if self.paired and self.subsets_per_example % 2:
            raise UsageError("paired sampling needs an even subsets_per_example")


def train_explainer(model: ExplainerModel, train_images: np.ndarray,
                    val_images: np.ndarray, config: ExplainerTrainConfig,
                    rng: RngState | None = None) -> tuple[ExplainerModel, dict]:
    """Train on fresh kernel subsets each step; keep the best-validation model.

    Every class contributes to the loss with equal weight for every sampled
    subset. Returns (best model, history with train/validation losses).
    """
    rng = rng or RngState(0)
    surrogate = model.surrogate
    d = surrogate.config.num_patches
    dist = shapley_kernel(d)
    gen = rng.derive(0).gen
    val_tuples = build_validation_tuples(surrogate, val_images,
                                         config.val_subsets_per_example, rng.derive(1))
    model = model.clone()
    params = model.parameters()
    opt = tk.init_optimizer(params, config.lr, config.weight_decay)
    n = train_images.shape[0]
    full, null = _grand_null_probs(surrogate, train_images)
    delta_all = full - null
    steps_per_epoch = max(1, (n + config.batch_size - 1) // config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    m = config.subsets_per_example
    history = {"train_loss": [], "val_loss": [], "best_epoch": None}
    best = model.clone()
    best_val = validation_loss(model, val_images, val_tuples)
    history["initial_val_loss"] = best_val
    step = 0
    for epoch in range(config.epochs):
        order = gen.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            b = len(idx)
            if config.paired:
                bits = np.stack([dist.paired_sample_matrix(gen, m // 2) for _ in range(b)])
            else:
                bits = np.stack([dist.sample_matrix(gen, m) for _ in range(b)])
            targets = vit.infer_probs(surrogate, np.repeat(train_images[idx], m, axis=0),
                                      bits.reshape(b * m, d)).reshape(b, m, -1)
            with tk.recording() as rec:
                loss = _batch_loss(model, train_images[idx], bits, targets,
                                   null[idx], delta_all[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite explainer loss at step {step}", step=step)
            tk.zero_grads(params)
            tk.backward(loss, rec)
            tk.adamw_step(opt, params, [p.grad for p in params], step / total_steps)
            losses.append(loss.item())
            step += 1
        val = validation_loss(model, val_images, val_tuples)
        history["train_loss"].append(float(np.mean(losses)))
        history["val_loss"].append(val)
        if val < best_val:
            best_val = val
            best = model.clone()
            history["best_epoch"] = epoch
    return best, history


# ---------------------------------------------------------------------------
# persistence


def save_explainer(path, model: ExplainerModel) -> None:
    tensors = {name: t.data for name, t in model.named_parameters()}
    for name, t in model.surrogate.named_parameters():
        tensors[f"surrogate.{name}"] = t.data
    config = {"kind": "explainer", "head": HEAD_KIND,
              "vit": model.config.to_dict(), "use_tanh": model.use_tanh}
    tk.save_checkpoint(path, config, tensors)


def load_explainer(path) -> ExplainerModel:
    header, tensors = tk.load_checkpoint(path)
    if header.get("kind") != "explainer":
        raise UsageError(f"{path}: not an explainer checkpoint")
    if header.get("head") != HEAD_KIND:
        raise UsageError(f"{path}: unsupported head {header.get('head')!r}")
    config = ViTConfig.from_dict(header["vit"])
    backbone = vit.weights_from_arrays(config, tensors, prefix="backbone.")
    surrogate = vit.weights_from_arrays(config, tensors, prefix="surrogate.")

    def grab(name: str) -> Tensor:
        key = f"head.{name}"
        if key not in tensors:
            raise UsageError(f"{path}: checkpoint is missing tensor {key!r}")
        return Tensor(tensors[key], requires_grad=True)

    block = BlockWeights(*(grab(f"block.{f}") for f in (
        "ln1_g", "ln1_b", "qkv_w", "proj_w", "ln2_g", "ln2_b",
        "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")))
    head = ExplainerHead(block, grab("fc1_w"), grab("fc1_b"), grab("fc2_w"),
                         grab("fc2_b"), grab("fc3_w"), grab("fc3_b"))
    return ExplainerModel(backbone, head, surrogate, bool(header.get("use_tanh", True)))
