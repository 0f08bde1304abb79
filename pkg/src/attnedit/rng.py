"""Deterministic randomness: every stream is derived from a base seed plus
string/number tags, so reruns and parallel schedules see identical draws."""

from __future__ import annotations

import hashlib

import numpy as np


def seed_for(*parts) -> int:
    """Stable 64-bit seed from arbitrary tags (component names, indices, scales)."""
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed_for(*parts)))
