"""Counter-based random streams keyed by (master seed, path id, stream role).

Every path draws from its own Philox stream, so a path's noise depends only on
the master seed and its id, never on how paths are grouped or scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

_MASK64 = (1 << 64) - 1


class Role(IntEnum):
    GAUSSIAN = 1
    JUMPS = 2
    CONTROL = 3
    CLOUD = 4
    MARKS = 5
    MISC = 6


@dataclass(frozen=True)
class Streams:
    """Factory for independent per-path generators."""

    seed: int

    def generator(self, path_id: int, role: Role | int) -> np.random.Generator:
        if path_id < 0 or path_id >= 1 << 48:
            raise ValueError(f"path id out of range: {path_id}")
        key = np.array([self.seed & _MASK64, (int(path_id) << 8) | int(role)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, salt: int) -> "Streams":
        """A disjoint family of streams (used for independent estimator runs)."""
        mixed = np.random.SeedSequence([self.seed & _MASK64, salt]).generate_state(2, np.uint64)
        return Streams(int(mixed[0]))


def as_streams(rng) -> Streams:
    if isinstance(rng, Streams):
        return rng
    if isinstance(rng, (int, np.integer)):
        return Streams(int(rng))
    raise TypeError(f"expected a Streams instance or an integer seed, got {type(rng).__name__}")
