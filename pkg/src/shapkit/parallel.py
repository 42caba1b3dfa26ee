"""Deterministic chunked evaluation with an optional thread pool.

SHAPKIT_THREADS caps the worker count (default 1). Results are assembled in
input order, so the thread count never changes any output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

from .errors import UsageError

_CHUNK = 2048


def worker_count() -> int:
    raw = os.environ.get("SHAPKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise UsageError(f"SHAPKIT_THREADS must be an integer, got {raw!r}") from e
    return max(1, n)


def chunked_rows(fn: Callable[[np.ndarray], np.ndarray], rows: np.ndarray,
                 chunk: int = _CHUNK) -> np.ndarray:
    """Apply fn to row chunks of `rows` and concatenate in order."""
    n = rows.shape[0]
    if n == 0:
        return fn(rows)
    pieces = [rows[i:i + chunk] for i in range(0, n, chunk)]
    workers = worker_count()
    if workers == 1 or len(pieces) == 1:
        outs = [fn(p) for p in pieces]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(fn, pieces))
    return np.concatenate(outs, axis=0)
