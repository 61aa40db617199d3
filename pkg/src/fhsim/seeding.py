"""Deterministic RNG stream derivation.

Every stochastic component derives its generator from an explicit key of
integers and strings, never from global state, so results are independent
of scheduling and identical across processes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _as_entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"seed key parts must be int or str, got {type(part).__name__}")


def seed_sequence(*parts) -> np.random.SeedSequence:
    """Build a SeedSequence from a mixed key of ints and strings."""
    return np.random.SeedSequence([_as_entropy(p) for p in parts])


def derive_rng(*parts) -> np.random.Generator:
    """Generator for the stream identified by the given key."""
    return np.random.default_rng(seed_sequence(*parts))


def derive_int(*parts) -> int:
    """Stable 63-bit integer for the given key (for APIs taking plain seeds)."""
    return int(seed_sequence(*parts).generate_state(1, np.uint64)[0] >> 1)
