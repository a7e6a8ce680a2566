"""Named random substreams derived from a single integer seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError(f"stream keys must be non-negative, got {k}")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; same inputs, same stream."""
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *map(_key, keys)]))


def substream_seed(seed: int, *keys) -> int:
    return int(stream(seed, *keys).integers(0, 2**31 - 1))
