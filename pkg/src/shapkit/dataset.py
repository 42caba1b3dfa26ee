"""Synthetic grayscale classification with planted patch-level signal.

Each image is Gaussian noise plus a class-specific template pasted into a few
randomly chosen patches. The planting locations are stored with every
example, giving ground truth for localization metrics: a faithful attribution
should rank exactly those patches at the top.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import struct

import numpy as np

from .errors import UsageError
from .tensorkit.rng import RngState
from .vit import ViTConfig

__all__ = [
    "PlantedConfig", "Split", "DatasetSplits", "class_templates", "generate",
    "hit_rate", "save_dataset", "load_dataset", "default_vit_config",
]

_MAGIC = b"SHPD1"


@dataclass(frozen=True)
class PlantedConfig:
    image_height: int = 16
    image_width: int = 16
    channels: int = 1
    patch_size: int = 4
    num_classes: int = 4
    signal_patches: int = 2
    amplitude: float = 2.0
    noise: float = 0.5
    train_size: int = 512
    val_size: int = 128
    test_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise UsageError("image sides must be divisible by the patch size")
        if not 1 <= self.signal_patches <= self.num_patches:
            raise UsageError("signal_patches must lie in 1..num_patches")
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) % self.num_classes:
                raise UsageError(f"{name} must be divisible by num_classes "
                                 "(class balance is exact by construction)")
        if self.num_patches > 255 or self.num_classes > 255:
            raise UsageError("patch and class counts must fit in a byte")

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "image_height", "image_width", "channels", "patch_size", "num_classes",
            "signal_patches", "amplitude", "noise", "train_size", "val_size",
            "test_size", "seed")}

    @classmethod
    def from_dict(cls, doc: dict) -> "PlantedConfig":
        try:
            return cls(**doc)
        except TypeError as e:
            raise UsageError(f"invalid dataset config: {e}") from e


@dataclass
class Split:
    images: np.ndarray  # (n, H, W, C)
    labels: np.ndarray  # (n,) int
    signal: np.ndarray  # (n, signal_patches) int, sorted per row

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class DatasetSplits:
    config: PlantedConfig
    train: Split
    val: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in ("train", "val", "test"):
            raise UsageError(f"unknown split {name!r}")
        return getattr(self, name)


def class_templates(config: PlantedConfig) -> np.ndarray:
    """(K, p, p, C) patterns, unit RMS before the amplitude scaling."""
    g = RngState(config.seed).derive(0).gen
    p, c = config.patch_size, config.channels
    raw = g.normal(0.0, 1.0, size=(config.num_classes, p, p, c))
    rms = np.sqrt((raw * raw).mean(axis=(1, 2, 3), keepdims=True))
    return config.amplitude * raw / rms


def _make_split(config: PlantedConfig, size: int, templates: np.ndarray,
                gen: np.random.Generator) -> Split:
    k, d, p = config.num_classes, config.num_patches, config.patch_size
    gw = config.image_width // p
    labels = np.repeat(np.arange(k), size // k)
    labels = labels[gen.permutation(size)].astype(np.int64)
    signal = np.empty((size, config.signal_patches), dtype=np.int64)
    for i in range(size):
        signal[i] = np.sort(gen.choice(d, size=config.signal_patches, replace=False))
    images = gen.normal(0.0, config.noise,
                        size=(size, config.image_height, config.image_width, config.channels))
    for i in range(size):
        t = templates[labels[i]]
        for patch in signal[i]:
            r, cidx = divmod(int(patch), gw)
            images[i, r * p:(r + 1) * p, cidx * p:(cidx + 1) * p, :] += t
    return Split(images, labels, signal)


def generate(config: PlantedConfig) -> DatasetSplits:
    """Deterministic in config.seed; regeneration is bit-identical."""
    templates = class_templates(config)
    parts = []
    for i, size in enumerate((config.train_size, config.val_size, config.test_size)):
        parts.append(_make_split(config, size, templates, RngState(config.seed).derive(i + 1).gen))
    return DatasetSplits(config, *parts)


def hit_rate(values: np.ndarray, signal: np.ndarray, top_k: int) -> float:
    """|top-k of values ∩ planted patches| / min(top_k, #planted).

    Ties in values break toward the lower patch index.
    """
    values = np.asarray(values, dtype=np.float64)
    d = values.shape[0]
    if not 1 <= top_k <= d:
        raise UsageError(f"top_k must lie in 1..{d}")
    order = np.lexsort((np.arange(d), -values))
    top = set(order[:top_k].tolist())
    sig = set(int(i) for i in np.asarray(signal).reshape(-1))
    return len(top & sig) / min(top_k, len(sig))


def save_dataset(path, data: DatasetSplits) -> None:
    config = data.config
    header = {
        "format": "SHPD1",
        "config": config.to_dict(),
        "splits": {"train": len(data.train), "val": len(data.val), "test": len(data.test)},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for split in (data.train, data.val, data.test):
            f.write(np.ascontiguousarray(split.images, dtype="<f8").tobytes())
        for split in (data.train, data.val, data.test):
            f.write(split.labels.astype(np.uint8).tobytes())
        for split in (data.train, data.val, data.test):
            f.write(split.signal.astype(np.uint8).tobytes())


def load_dataset(path) -> DatasetSplits:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(_MAGIC) + 4 or data[: len(_MAGIC)] != _MAGIC:
        raise UsageError(f"{path}: not a SHPD1 dataset file")
    (hlen,) = struct.unpack_from("<I", data, len(_MAGIC))
    start = len(_MAGIC) + 4
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        config = PlantedConfig.from_dict(header["config"])
        sizes = [int(header["splits"][s]) for s in ("train", "val", "test")]
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise UsageError(f"{path}: corrupt dataset header ({e})") from e
    body = memoryview(data)[start + hlen:]
    pix = config.image_height * config.image_width * config.channels
    total = sum(sizes)
    expected = total * pix * 8 + total + total * config.signal_patches
    if len(body) != expected:
        raise UsageError(f"{path}: payload length {len(body)} != expected {expected}")
    off = 0
    images = []
    for n in sizes:
        count = n * pix
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off)
        images.append(arr.reshape(n, config.image_height, config.image_width,
                                  config.channels).astype(np.float64))
        off += count * 8
    labels = []
    for n in sizes:
        labels.append(np.frombuffer(body, dtype=np.uint8, count=n, offset=off).astype(np.int64))
        off += n
    signal = []
    for n in sizes:
        count = n * config.signal_patches
        arr = np.frombuffer(body, dtype=np.uint8, count=count, offset=off)
        signal.append(arr.reshape(n, config.signal_patches).astype(np.int64))
        off += count
    splits = [Split(images[i], labels[i], signal[i]) for i in range(3)]
    return DatasetSplits(config, *splits)


def default_vit_config(config: PlantedConfig, **overrides) -> ViTConfig:
    """A model config matched to the dataset geometry."""
    base = dict(image_height=config.image_height, image_width=config.image_width,
                channels=config.channels, patch_size=config.patch_size,
                num_classes=config.num_classes)
    base.update(overrides)
    return ViTConfig(**base)
