"""Deterministic derived random streams.

Every stochastic component takes an explicit `numpy.random.Generator`.
Streams are derived from (seed, string tag, indices...) so parallel or
resumed work replays bit-identically regardless of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*keys) -> np.random.Generator:
    """Generator seeded by the exact key tuple; stable across processes."""
    return np.random.default_rng(np.random.SeedSequence([_key_int(k) for k in keys]))
