"""
Seeded random streams.

Every random draw in mitoclass comes from a Philox (counter-based, 64-bit)
generator keyed by a tuple of integers and strings, e.g. (seed, patch_id, epoch).
Streams never share state, so work on distinct keys can run in any order or in
parallel and still produce the sequential result.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]

_MASK64 = (1 << 64) - 1


def key_to_int(key: Key) -> int:
    if isinstance(key, bool):
        return int(key)
    if isinstance(key, (int, np.integer)):
        value = int(key)
        if value < 0:
            raise ValueError(f"stream keys must be non-negative, got {value}")
        return value & _MASK64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(*keys: Key) -> np.random.Generator:
    entropy = [key_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(*keys: Key) -> int:
    """A 64-bit seed drawn from the stream for `keys`."""
    return int(stream(*keys).integers(0, 1 << 63, dtype=np.int64))
