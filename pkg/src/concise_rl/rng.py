"""Counter-based random streams.

Every random draw in the engine comes from a Philox generator keyed by a
tuple of integers (seed, purpose, step, ...), so a draw depends only on
its key and never on how work was scheduled.
"""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("init", "questions", "rollout", "eval", "demo", "misc")


def purpose_code(purpose: str) -> int:
    if purpose in PURPOSES:
        return PURPOSES.index(purpose)
    return zlib.crc32(purpose.encode()) + len(PURPOSES)


def stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    """Return an independent Philox generator for the key (seed, purpose, *ids)."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, purpose_code(purpose)]
    key.extend(int(i) for i in ids)
    if any(i < 0 for i in key):
        raise ValueError(f"stream key components must be non-negative: {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
