"""Seed derivation.

Every random draw in the package comes from a master seed plus a tuple of
integer or string keys, so results never depend on call order or threads.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(k: int | str) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    if k < 0:
        raise ValueError(f"seed keys must be non-negative, got {k}")
    return int(k)


def derive_seed(master: int, *keys: int | str) -> int:
    """Return a 32-bit seed for the stream identified by ``(master, *keys)``."""
    ss = np.random.SeedSequence([_key(master), *(_key(k) for k in keys)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(master: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_key(master), *(_key(k) for k in keys)]))
