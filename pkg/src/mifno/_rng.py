"""Deterministic, splittable random streams.

Every stochastic routine in the package draws from a stream derived from
(master_seed, *keys) so that sample i is generated identically no matter
which worker produces it or in which order.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, str):
        # stable across processes, unlike hash()
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def stream(master_seed: int, *keys) -> np.random.Generator:
    """Return a Generator keyed by (master_seed, *keys).

    Uses the counter-based Philox bit generator; streams for different key
    tuples are independent, and the same tuple always yields the same
    stream regardless of call order or process.
    """
    spawn = tuple(_key_to_int(k) for k in keys)
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=spawn)
    return np.random.Generator(np.random.Philox(seq))
