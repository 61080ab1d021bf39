"""Deterministic random streams keyed by (master seed, labels...)."""

from __future__ import annotations

import hashlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream(seed: int, *key) -> np.random.Generator:
    """Independent generator for ``key`` under ``seed``.

    Keys may mix non-negative ints (replicate, subject index) and strings
    (stream names).  The same (seed, key) always yields the same stream, and
    distinct keys give statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_part(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *key) -> int:
    """A 63-bit integer seed for ``key``, for APIs that record an int seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_part(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1
