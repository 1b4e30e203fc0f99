"""Deterministic derivation of independent random streams.

Every stochastic component takes its randomness from a stream derived from
a master seed plus a path of labels, e.g. ``substream(seed, "rep", 3,
"study", 7, "noise")``.  Streams with different paths are statistically
independent, and the same (seed, path) pair always yields the same stream,
regardless of how many other streams were created before it.  This is what
makes replications parallelizable without losing bit-level reproducibility.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _encode(part: int | str) -> int:
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    return int(part) & _MASK64


def substream(master_seed: int, *path: int | str) -> np.random.Generator:
    """Return a ``numpy.random.Generator`` for the given seed and path."""
    entropy = [_encode(master_seed)] + [_encode(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def spawn_seed(master_seed: int, *path: int | str) -> int:
    """Derive a 63-bit integer seed, for components that take a seed field."""
    return int(substream(master_seed, *path).integers(1 << 63))
