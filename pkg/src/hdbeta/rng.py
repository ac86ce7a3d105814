"""Seed derivation so every random stream traces back to one top-level seed."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Stable 64-bit seed from ``seed`` and a purpose label path."""
    text = "/".join([str(int(seed))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def generator(seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed(seed, *labels)))
