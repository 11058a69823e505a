"""Named, independent RNG substreams.

Every consumer asks for ``derive_seed(root, "name", ...)``; the keys are hashed
together with the root seed, so adding a new consumer never shifts the
streams that already exist. Keys may be ints or strings.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(root, *keys) -> int:
    """A 63-bit integer seed for substream ``keys`` of ``root``."""
    ss = np.random.SeedSequence(entropy=_key_to_int(root), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 1 << 32], dtype=np.uint64)) >> 1


def rng(root, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
