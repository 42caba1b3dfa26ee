"""Deterministic random streams: one integer seed, PCG64 underneath."""

from __future__ import annotations

import numpy as np

from ..errors import UsageError

_SEED_MASK = (1 << 63) - 1


class RngState:
    """A named random stream; equal seeds give bit-identical draw sequences."""

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)):
            raise UsageError("seed must be an integer")
        self.seed = int(seed) & _SEED_MASK
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def derive(self, index: int) -> "RngState":
        """Independent child stream; (seed, index) fully determines it."""
        words = np.random.SeedSequence([self.seed, int(index) & _SEED_MASK]).generate_state(2)
        return RngState((int(words[0]) << 32) | int(words[1]))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed})"
