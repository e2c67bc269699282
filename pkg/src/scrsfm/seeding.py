"""Counter-based seed splitting: every consumer derives its own stream from
(root seed, stream name, counters) so streams are independent and
reproducible regardless of call order."""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def seed_sequence(root, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key(k) for k in keys))


def derive_rng(root, *keys) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, *keys))


def derive_seed(root, *keys) -> int:
    lo, hi = seed_sequence(root, *keys).generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)
