"""Seeded deterministic random generators with stable stream derivation."""
from __future__ import annotations

import zlib

import numpy as np


def new_rng(seed: int) -> np.random.Generator:
    """Fresh PCG64 generator; identical seed gives an identical draw sequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream keyed by (seed, *keys); strings hash via crc32."""
    ints = [int(seed)]
    for k in keys:
        ints.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(ints)))
