"""Stable seed derivation so every simulation component is a pure function of its seeds."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash an arbitrary tuple of labels/ints into a 63-bit seed.

    Independent of Python's randomized str hash, so derived seeds are stable
    across processes and platforms.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
