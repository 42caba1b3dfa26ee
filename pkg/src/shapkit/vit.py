"""Patch transformers evaluated on arbitrary patch subsets via attention masking.

Partial input is realized without retraining: attention logits from retained
queries to held-out keys are forced to probability exactly 0.0 before the
value mixing, and (for GAP readout) pooling averages retained patch tokens
only. Because held-out keys contribute an exact 0.0 to every retained-token
sum, the retained outputs are bit-identical no matter what the held-out
patches contain. The class token, when present, is never maskable.

One forward implementation serves both training (inside a recording) and
inference (outside any recording, where ops skip the tape).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorkit as tk
from .errors import DomainError, TrainingError, UsageError
from .tensorkit import RngState, Tensor

__all__ = [
    "ViTConfig", "BlockWeights", "ViTWeights", "TrainSchedule",
    "init_classifier_weights", "patchify", "unpatchify", "embed_tokens",
    "forward_tokens", "readout_logits", "forward_logits", "infer_probs",
    "infer_from_tokens", "train_classifier", "accuracy",
    "save_vit_checkpoint", "load_vit_checkpoint",
]


@dataclass(frozen=True)
class ViTConfig:
    """Architecture of a small patch transformer."""

    image_height: int = 16
    image_width: int = 16
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 2
    num_layers: int = 2
    num_classes: int = 4
    readout: str = "class_token"  # or "gap"
    use_positional: bool = True

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise UsageError("image sides must be divisible by the patch size")
        if self.embed_dim % self.num_heads:
            raise UsageError("embed_dim must be divisible by num_heads")
        if self.readout not in ("class_token", "gap"):
            raise UsageError(f"unknown readout {self.readout!r}")
        for name in ("channels", "embed_dim", "num_heads", "num_layers", "num_classes"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive")

    @property
    def grid_height(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_width(self) -> int:
        return self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def has_class_token(self) -> bool:
        return self.readout == "class_token"

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.has_class_token else 0)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {
            "image_height": self.image_height, "image_width": self.image_width,
            "channels": self.channels, "patch_size": self.patch_size,
            "embed_dim": self.embed_dim, "num_heads": self.num_heads,
            "num_layers": self.num_layers, "num_classes": self.num_classes,
            "readout": self.readout, "use_positional": self.use_positional,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ViTConfig":
        try:
            return cls(**doc)
        except TypeError as e:
            raise UsageError(f"invalid model config: {e}") from e


@dataclass
class BlockWeights:
    """One pre-norm transformer block (attention + MLP, both residual)."""

    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    proj_w: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self, prefix: str):
        for name in ("ln1_g", "ln1_b", "qkv_w", "proj_w", "ln2_g", "ln2_b",
                     "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class ViTWeights:
    """All parameters of one model; head tensors are absent for backbones."""

    config: ViTConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor | None
    pos: Tensor | None
    blocks: list[BlockWeights] = field(default_factory=list)
    head_w: Tensor | None = None
    head_b: Tensor | None = None

    def named_parameters(self):
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        if self.cls_token is not None:
            yield "cls_token", self.cls_token
        if self.pos is not None:
            yield "pos", self.pos
        for i, bw in enumerate(self.blocks):
            yield from bw.named(f"block{i}")
        if self.head_w is not None:
            yield "head_w", self.head_w
            yield "head_b", self.head_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def clone(self) -> "ViTWeights":
        def cp(t: Tensor | None) -> Tensor | None:
            return None if t is None else Tensor(t.data.copy(), requires_grad=t.requires_grad)

        blocks = [BlockWeights(*(cp(getattr(bw, f)) for f in (
            "ln1_g", "ln1_b", "qkv_w", "proj_w", "ln2_g", "ln2_b",
            "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"))) for bw in self.blocks]
        return ViTWeights(self.config, cp(self.patch_w), cp(self.patch_b),
                          cp(self.cls_token), cp(self.pos), blocks,
                          cp(self.head_w), cp(self.head_b))

    def without_positional(self) -> "ViTWeights":
        out = self.clone()
        out.pos = None
        out.config = replace(out.config, use_positional=False)
        return out


def _param(gen: np.random.Generator, shape: tuple[int, ...], std: float) -> Tensor:
    data = gen.normal(0.0, std, size=shape) if std > 0 else np.zeros(shape)
    return Tensor(data, requires_grad=True)


def init_classifier_weights(config: ViTConfig, rng: RngState, with_head: bool = True) -> ViTWeights:
    """Fresh weights; the draw order is fixed, so a seed pins every parameter."""
    g = rng.gen
    h = config.embed_dim
    w = ViTWeights(
        config=config,
        patch_w=_param(g, (config.patch_dim, h), config.patch_dim ** -0.5),
        patch_b=_param(g, (h,), 0.0),
        cls_token=_param(g, (h,), 0.02) if config.has_class_token else None,
        pos=_param(g, (config.num_tokens, h), 0.02) if config.use_positional else None,
    )
    for _ in range(config.num_layers):
        w.blocks.append(BlockWeights(
            ln1_g=Tensor(np.ones(h), requires_grad=True),
            ln1_b=_param(g, (h,), 0.0),
            qkv_w=_param(g, (h, 3 * h), h ** -0.5),
            proj_w=_param(g, (h, h), h ** -0.5),
            ln2_g=Tensor(np.ones(h), requires_grad=True),
            ln2_b=_param(g, (h,), 0.0),
            mlp_w1=_param(g, (h, 4 * h), h ** -0.5),
            mlp_b1=_param(g, (4 * h,), 0.0),
            mlp_w2=_param(g, (4 * h, h), (4 * h) ** -0.5),
            mlp_b2=_param(g, (h,), 0.0),
        ))
    if with_head:
        w.head_w = _param(g, (h, config.num_classes), h ** -0.5)
        w.head_b = _param(g, (config.num_classes,), 0.0)
    return w


# ---------------------------------------------------------------------------
# patch geometry


def patchify(images: np.ndarray, config: ViTConfig) -> np.ndarray:
    """(B, H, W, C) -> (B, d, p*p*C); patches row-major over the grid,
    pixels row-major within a patch, channels last. Exactly invertible."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, hh, ww, cc = images.shape
    if (hh, ww, cc) != (config.image_height, config.image_width, config.channels):
        raise UsageError(f"image shape {(hh, ww, cc)} does not match the config")
    p = config.patch_size
    x = images.reshape(b, config.grid_height, p, config.grid_width, p, cc)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    out = np.ascontiguousarray(x.reshape(b, config.num_patches, config.patch_dim))
    return out[0] if single else out


def unpatchify(patches: np.ndarray, config: ViTConfig) -> np.ndarray:
    """Inverse of patchify."""
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b = patches.shape[0]
    p = config.patch_size
    x = patches.reshape(b, config.grid_height, config.grid_width, p, p, config.channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    out = np.ascontiguousarray(
        x.reshape(b, config.image_height, config.image_width, config.channels))
    return out[0] if single else out


# ---------------------------------------------------------------------------
# forward


def _key_mask(config: ViTConfig, batch: int, patch_masks: np.ndarray | None) -> np.ndarray:
    """(B, T) boolean attention-key mask; the class token is always retained."""
    if patch_masks is None:
        return np.ones((batch, config.num_tokens), dtype=bool)
    pm = np.asarray(patch_masks, dtype=bool)
    if pm.shape != (batch, config.num_patches):
        raise UsageError(f"patch masks must have shape ({batch}, {config.num_patches})")
    if not config.has_class_token:
        return pm
    return np.concatenate([np.ones((batch, 1), dtype=bool), pm], axis=1)


def _block(bw: BlockWeights, x: Tensor, key_mask: np.ndarray, config: ViTConfig,
           attn_post: bool, capture: list | None) -> Tensor:
    hd = config.head_dim
    xn = tk.layer_norm(x, bw.ln1_g, bw.ln1_b)
    qkv = tk.matmul(xn, bw.qkv_w)
    h = config.embed_dim
    heads = []
    maps = []
    for i in range(config.num_heads):
        q = tk.narrow(qkv, 2, i * hd, hd)
        k = tk.narrow(qkv, 2, h + i * hd, hd)
        v = tk.narrow(qkv, 2, 2 * h + i * hd, hd)
        logits = tk.scale(tk.matmul(q, tk.transpose(k)), hd ** -0.5)
        if attn_post:
            att = tk.softmax(logits)
            att = tk.mul(att, key_mask[:, None, :].astype(np.float64))
        else:
            att = tk.masked_softmax(logits, key_mask[:, None, :])
        if capture is not None:
            maps.append(att.data)
        heads.append(tk.matmul(att, v))
    if capture is not None:
        capture.append(np.stack(maps, axis=1))  # (B, heads, T, T)
    x = tk.add(x, tk.matmul(tk.concat(heads, axis=2), bw.proj_w))
    xn2 = tk.layer_norm(x, bw.ln2_g, bw.ln2_b)
    hidden = tk.gelu(tk.add(tk.matmul(xn2, bw.mlp_w1), bw.mlp_b1))
    return tk.add(x, tk.add(tk.matmul(hidden, bw.mlp_w2), bw.mlp_b2))


def _embed(weights: ViTWeights, images: np.ndarray) -> Tensor:
    config = weights.config
    patches = patchify(images, config)
    if patches.ndim == 2:
        patches = patches[None]
    tok = tk.add(tk.matmul(Tensor(patches), weights.patch_w), weights.patch_b)
    if weights.cls_token is not None:
        ct = tk.broadcast_to(tk.reshape(weights.cls_token, (1, 1, config.embed_dim)),
                             (patches.shape[0], 1, config.embed_dim))
        tok = tk.concat([ct, tok], axis=1)
    if weights.pos is not None:
        tok = tk.add(tok, weights.pos)
    return tok


def embed_tokens(weights: ViTWeights, images: np.ndarray) -> np.ndarray:
    """Mask-independent embedding stage (patch projection + class token + position)."""
    return _embed(weights, images).data


def _run_blocks(weights: ViTWeights, tok: Tensor, patch_masks: np.ndarray | None,
                zero_heldout_tokens: bool = False, attn_post: bool = False,
                capture: list | None = None) -> Tensor:
    config = weights.config
    batch = tok.shape[0]
    km = _key_mask(config, batch, patch_masks)
    if zero_heldout_tokens:
        # Removal by zeroed embeddings: tokens wiped, attention left unmasked.
        tok = tk.mul(tok, km[:, :, None].astype(np.float64))
        km = np.ones_like(km)
    for bw in weights.blocks:
        tok = _block(bw, tok, km, config, attn_post, capture)
    return tok


def forward_tokens(weights: ViTWeights, images: np.ndarray,
                   patch_masks: np.ndarray | None = None, **flags) -> Tensor:
    return _run_blocks(weights, _embed(weights, images), patch_masks, **flags)


def readout_logits(weights: ViTWeights, tok: Tensor,
                   patch_masks: np.ndarray | None) -> Tensor:
    config = weights.config
    if weights.head_w is None:
        raise UsageError("weights carry no classifier head")
    if config.has_class_token:
        pooled = tk.reshape(tk.narrow(tok, 1, 0, 1), (tok.shape[0], config.embed_dim))
    else:
        if patch_masks is None:
            pm = np.ones((tok.shape[0], config.num_patches), dtype=bool)
        else:
            pm = np.asarray(patch_masks, dtype=bool)
        counts = pm.sum(axis=1)
        if (counts == 0).any():
            raise DomainError("GAP readout over an empty retained set")
        w = pm.astype(np.float64) / counts[:, None]
        pooled = tk.reshape(tk.matmul(Tensor(w[:, None, :]), tok), (tok.shape[0], config.embed_dim))
    return tk.add(tk.matmul(pooled, weights.head_w), weights.head_b)


def forward_logits(weights: ViTWeights, images: np.ndarray,
                   patch_masks: np.ndarray | None = None, **flags) -> Tensor:
    tok = forward_tokens(weights, images, patch_masks, **flags)
    return readout_logits(weights, tok, patch_masks)


def infer_probs(weights: ViTWeights, images: np.ndarray,
                patch_masks: np.ndarray | None = None, **flags) -> np.ndarray:
    """(B, K) class probabilities; runs outside any recording (no tape)."""
    single = np.asarray(images).ndim == 3
    if single:
        images = np.asarray(images)[None]
        if patch_masks is not None:
            patch_masks = np.asarray(patch_masks).reshape(1, -1)
    probs = tk.softmax(forward_logits(weights, images, patch_masks, **flags)).data
    return probs[0] if single else probs


def infer_from_tokens(weights: ViTWeights, tokens: np.ndarray,
                      patch_masks: np.ndarray) -> np.ndarray:
    """Probabilities for one pre-embedded input under many patch subsets.

    `tokens` is the (T, h) embedding of a single image; every row of
    `patch_masks` is evaluated against it.
    """
    patch_masks = np.asarray(patch_masks, dtype=bool)
    n = patch_masks.shape[0]
    if n == 0:
        return np.zeros((0, weights.config.num_classes))
    tiled = Tensor(np.broadcast_to(tokens, (n,) + tokens.shape))
    tok = _run_blocks(weights, tiled, patch_masks)
    return tk.softmax(readout_logits(weights, tok, patch_masks)).data


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSchedule:
    """AdamW + cosine decay; the rate starts at lr and anneals toward zero."""

    epochs: int
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise UsageError("invalid training schedule")


def train_classifier(train_images: np.ndarray, train_labels: np.ndarray,
                     val_images: np.ndarray, val_labels: np.ndarray,
                     config: ViTConfig, schedule: TrainSchedule,
                     masking: str = "none", rng: RngState | None = None,
                     init: ViTWeights | None = None) -> tuple[ViTWeights, dict]:
    """Cross-entropy training; masking='random' draws one uniform-cardinality
    patch subset per example per step so the model learns partial inputs."""
    from .subsets import uniform_cardinality

    if masking not in ("none", "random"):
        raise UsageError(f"unknown masking mode {masking!r}")
    rng = rng or RngState(0)
    weights = init.clone() if init is not None else init_classifier_weights(config, rng.derive(0))
    params = weights.parameters()
    opt = tk.init_optimizer(params, schedule.lr, schedule.weight_decay)
    data_gen = rng.derive(1).gen
    n = train_images.shape[0]
    steps_per_epoch = max(1, (n + schedule.batch_size - 1) // schedule.batch_size)
    total_steps = max(1, schedule.epochs * steps_per_epoch)
    dist = uniform_cardinality(config.num_patches) if masking == "random" else None
    history = {"train_loss": [], "val_accuracy": []}
    step = 0
    for _ in range(schedule.epochs):
        order = data_gen.permutation(n)
        epoch_losses = []
        for lo in range(0, n, schedule.batch_size):
            idx = order[lo:lo + schedule.batch_size]
            masks = dist.sample_matrix(data_gen, len(idx)) if dist is not None else None
            with tk.recording() as rec:
                logits = forward_logits(weights, train_images[idx], masks)
                loss = tk.cross_entropy_logits(logits, train_labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite training loss at step {step}", step=step)
            tk.zero_grads(params)
            tk.backward(loss, rec)
            tk.adamw_step(opt, params, [p.grad for p in params], step / total_steps)
            epoch_losses.append(loss.item())
            step += 1
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_accuracy"].append(accuracy(weights, val_images, val_labels))
    return weights, history


def accuracy(weights: ViTWeights, images: np.ndarray, labels: np.ndarray,
             patch_masks: np.ndarray | None = None) -> float:
    probs = infer_probs(weights, images, patch_masks)
    return float((probs.argmax(axis=1) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# persistence


def _weight_arrays(weights: ViTWeights) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in weights.named_parameters()}


def save_vit_checkpoint(path, weights: ViTWeights, kind: str,
                        extra_config: dict | None = None) -> None:
    config = {"kind": kind, "vit": weights.config.to_dict()}
    if extra_config:
        config.update(extra_config)
    tk.save_checkpoint(path, config, _weight_arrays(weights))


def load_vit_checkpoint(path, expect_kind: str | None = None) -> tuple[ViTWeights, dict]:
    header, tensors = tk.load_checkpoint(path)
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise UsageError(f"{path}: checkpoint kind {kind!r}, expected {expect_kind!r}")
    if "vit" not in header:
        raise UsageError(f"{path}: checkpoint lacks a model config")
    config = ViTConfig.from_dict(header["vit"])
    weights = weights_from_arrays(config, tensors)
    return weights, header


def weights_from_arrays(config: ViTConfig, tensors: dict[str, np.ndarray],
                        prefix: str = "") -> ViTWeights:
    def grab(name: str, optional: bool = False) -> Tensor | None:
        key = prefix + name
        if key not in tensors:
            if optional:
                return None
            raise UsageError(f"checkpoint is missing tensor {key!r}")
        return Tensor(tensors[key], requires_grad=True)

    w = ViTWeights(
        config=config,
        patch_w=grab("patch_w"),
        patch_b=grab("patch_b"),
        cls_token=grab("cls_token", optional=True),
        pos=grab("pos", optional=True),
        head_w=grab("head_w", optional=True),
        head_b=grab("head_b", optional=True),
    )
    if config.has_class_token and w.cls_token is None:
        raise UsageError("config expects a class token but none was saved")
    if config.use_positional and w.pos is None:
        raise UsageError("config expects positional embeddings but none were saved")
    for i in range(config.num_layers):
        fields = {}
        for fname in ("ln1_g", "ln1_b", "qkv_w", "proj_w", "ln2_g", "ln2_b",
                      "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"):
            fields[fname] = grab(f"block{i}.{fname}")
        w.blocks.append(BlockWeights(**fields))
    return w
