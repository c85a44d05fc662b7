"""Per-purpose seed derivation: every random stream comes from one global seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str, key: object = "") -> int:
    """Stable 63-bit seed from ``(seed, purpose, key)``; independent of PYTHONHASHSEED."""
    h = hashlib.blake2b(f"{seed}\x1f{purpose}\x1f{key}".encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(seed: int, purpose: str, key: object = "") -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose, key))
