"""Single-file binary checkpoints.

Layout: 5-byte magic "SHPK1", little-endian u32 header length, UTF-8 JSON
header, then raw little-endian float64 tensor payloads back to back. The
header carries a free-form config dict plus a manifest of (name, shape,
offset) entries in write order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import UsageError

MAGIC = b"SHPK1"


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    manifest = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = arr.astype("<f8", copy=False).tobytes()  # tobytes is C-ordered
        manifest.append({"name": name, "dtype": "f64", "shape": list(arr.shape),
                         "offset": offset})
        payloads.append(raw)
        offset += len(raw)
    header = {"format": "SHPK1", "config": config, "tensors": manifest}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise UsageError(f"{path}: not a SHPK1 checkpoint")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if len(data) < start + hlen:
        raise UsageError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise UsageError(f"{path}: corrupt header ({e})") from e
    body = data[start + hlen:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        if entry.get("dtype") != "f64":
            raise UsageError(f"{path}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = int(entry["offset"])
        end = off + 8 * count
        if end > len(body):
            raise UsageError(f"{path}: truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64, copy=True)
    return header.get("config", {}), tensors
