"""Seeded random streams keyed by purpose and indices.

Every random draw in the package comes from a stream derived here, so a
run is a pure function of its seed. Keys are hashed with crc32 (stable
across processes, unlike Python's builtin hash).
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Generator for (seed, purpose, indices); same key, same sequence."""
    key = [int(seed) & _MASK64, zlib.crc32(purpose.encode("utf-8"))]
    key.extend(int(i) & _MASK64 for i in indices)
    return np.random.default_rng(np.random.SeedSequence(key))
