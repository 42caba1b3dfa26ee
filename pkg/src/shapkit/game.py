"""Coalitional games over patch subsets, with per-class payoffs.

A Subset is an immutable bit vector over d players; bit i set means player
(patch) i is present. Subsets map to integers little-endian: the code of s
is sum over set bits i of 2^i, so player 0 is the least significant bit.

Game backends:
  * TabularGame   explicit 2^d x K table
  * AdditiveGame  v(s, y) = base_y + s . w_y  (zero interactions by design)
  * ModelGame     masked forward passes of a patch-transformer classifier
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CapabilityError, DomainError, UsageError
from .parallel import chunked_rows

__all__ = [
    "Subset", "CoalitionalGame", "TabularGame", "AdditiveGame", "ModelGame",
    "all_subsets_matrix", "save_tabular_json", "load_tabular_json",
]

_ENUM_LIMIT = 20


class Subset:
    """Immutable boolean membership vector over d players."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.array(bits, dtype=bool).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "bits", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Subset is immutable")

    @classmethod
    def empty(cls, d: int) -> "Subset":
        return cls(np.zeros(d, dtype=bool))

    @classmethod
    def full(cls, d: int) -> "Subset":
        return cls(np.ones(d, dtype=bool))

    @classmethod
    def from_indices(cls, d: int, indices) -> "Subset":
        bits = np.zeros(d, dtype=bool)
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= d):
            raise UsageError("subset index out of range")
        bits[idx] = True
        return cls(bits)

    @classmethod
    def from_index(cls, d: int, code: int) -> "Subset":
        if not 0 <= code < (1 << d):
            raise UsageError(f"subset code {code} outside [0, 2^{d})")
        return cls([(code >> i) & 1 for i in range(d)])

    @property
    def d(self) -> int:
        return self.bits.shape[0]

    @property
    def cardinality(self) -> int:
        return int(self.bits.sum())

    def index(self) -> int:
        """Little-endian integer code: player 0 is the least significant bit."""
        return int(sum(1 << i for i in np.flatnonzero(self.bits)))

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def complement(self) -> "Subset":
        return Subset(~self.bits)

    def with_member(self, i: int) -> "Subset":
        if self.bits[i]:
            raise UsageError(f"player {i} already present")
        bits = self.bits.copy()
        bits[i] = True
        return Subset(bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, Subset) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash((self.d, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"Subset({''.join('1' if b else '0' for b in self.bits)})"


def all_subsets_matrix(d: int) -> np.ndarray:
    """(2^d, d) boolean matrix of every subset in encoding order."""
    if d > _ENUM_LIMIT:
        raise CapabilityError(f"enumeration over 2^{d} subsets exceeds the d<={_ENUM_LIMIT} limit")
    codes = np.arange(1 << d, dtype=np.uint32)
    return (codes[:, None] >> np.arange(d)[None, :]) & 1 > 0


class CoalitionalGame:
    """Base class: per-class set functions with batched evaluation."""

    d: int
    num_classes: int

    def evaluate_matrix_all(self, bits: np.ndarray) -> np.ndarray:
        """(n, d) boolean rows -> (n, K) values. Subclasses implement this."""
        raise NotImplementedError

    def evaluate_matrix(self, bits: np.ndarray, y: int) -> np.ndarray:
        self._check_class(y)
        return self.evaluate_matrix_all(bits)[:, y]

    def evaluate(self, s: Subset, y: int) -> float:
        self._check_subset(s)
        return float(self.evaluate_matrix(s.bits[None, :], y)[0])

    def evaluate_batch(self, subsets, y: int) -> np.ndarray:
        """Order-preserving batch evaluation of a sequence of Subsets."""
        if len(subsets) == 0:
            return np.zeros(0)
        for s in subsets:
            self._check_subset(s)
        bits = np.stack([s.bits for s in subsets])
        return self.evaluate_matrix(bits, y)

    def grand_and_null(self, y: int) -> tuple[float, float]:
        """(v(full), v(empty))."""
        bits = np.stack([np.ones(self.d, dtype=bool), np.zeros(self.d, dtype=bool)])
        vals = self.evaluate_matrix(bits, y)
        return float(vals[0]), float(vals[1])

    def _check_subset(self, s: Subset) -> None:
        if not isinstance(s, Subset):
            raise UsageError(f"expected a Subset, got {type(s).__name__}")
        if s.d != self.d:
            raise UsageError(f"subset has d={s.d}, game has d={self.d}")

    def _check_class(self, y: int) -> None:
        if not 0 <= int(y) < self.num_classes:
            raise UsageError(f"class {y} outside 0..{self.num_classes - 1}")


class TabularGame(CoalitionalGame):
    """Explicit value table, one row per subset code, one column per class."""

    def __init__(self, values: np.ndarray, d: int):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != (1 << d):
            raise UsageError(f"value table needs 2^{d} rows, got {values.shape[0]}")
        if not np.isfinite(values).all():
            raise DomainError("value table contains non-finite entries")
        self.values = values
        self.d = d
        self.num_classes = values.shape[1]

    def evaluate_matrix_all(self, bits: np.ndarray) -> np.ndarray:
        codes = bits.astype(np.int64) @ (1 << np.arange(self.d, dtype=np.int64))
        return self.values[codes]


class AdditiveGame(CoalitionalGame):
    """v(s, y) = base_y + s . weights_y; its Shapley values are the weights."""

    def __init__(self, base: np.ndarray, weights: np.ndarray):
        base = np.atleast_1d(np.asarray(base, dtype=np.float64))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim == 1:
            weights = weights[None, :]
        if base.shape[0] != weights.shape[0]:
            raise UsageError("base and weights disagree on the class count")
        self.base = base
        self.weights = weights
        self.d = weights.shape[1]
        self.num_classes = weights.shape[0]

    def evaluate_matrix_all(self, bits: np.ndarray) -> np.ndarray:
        return self.base[None, :] + bits.astype(np.float64) @ self.weights.T


class ModelGame(CoalitionalGame):
    """v(s, y) = class-y probability of one image with patches s retained.

    The patch embedding of the image is computed once; each evaluation runs
    the transformer blocks under the subset's attention mask. An optional
    memo table caches probability rows by subset.
    """

    def __init__(self, weights, image: np.ndarray, memoize: bool = False):
        from . import vit  # deferred: vit imports Subset from this module

        self._vit = vit
        self.weights = weights
        self.image = np.asarray(image, dtype=np.float64)
        self.d = weights.config.num_patches
        self.num_classes = weights.config.num_classes
        self._tokens = vit.embed_tokens(weights, self.image[None, ...])[0]
        self._memo: dict[bytes, np.ndarray] | None = {} if memoize else None

    def evaluate_matrix_all(self, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits, dtype=bool)
        if self._memo is None:
            return self._infer(bits)
        keys = [np.packbits(row).tobytes() for row in bits]
        missing = [i for i, k in enumerate(keys) if k not in self._memo]
        if missing:
            fresh = self._infer(bits[missing])
            for row, i in enumerate(missing):
                self._memo[keys[i]] = fresh[row]
        return np.stack([self._memo[k] for k in keys])

    def _infer(self, bits: np.ndarray) -> np.ndarray:
        def run(chunk: np.ndarray) -> np.ndarray:
            return self._vit.infer_from_tokens(self.weights, self._tokens, chunk)

        return chunked_rows(run, bits)


def save_tabular_json(path: str | Path, game: TabularGame) -> None:
    doc = {"d": game.d, "classes": game.num_classes,
           "values": game.values.reshape(-1).tolist()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_tabular_json(path: str | Path) -> TabularGame:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        d = int(doc["d"])
        k = int(doc["classes"])
        values = np.asarray(doc["values"], dtype=np.float64)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise UsageError(f"{path}: invalid tabular game file ({e})") from e
    if d > _ENUM_LIMIT:
        raise CapabilityError(f"tabular game with d={d} exceeds the d<={_ENUM_LIMIT} limit")
    if values.size != (1 << d) * k:
        raise UsageError(f"{path}: expected {(1 << d) * k} values, got {values.size}")
    return TabularGame(values.reshape(1 << d, k), d)
