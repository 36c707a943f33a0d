"""Seed plumbing.

One master seed fans out to independent named streams through
``np.random.SeedSequence`` spawn keys, so adding a consumer never
shifts the draws of existing ones. Path components are either small
ints (trial indices) or strings hashed to a 32-bit word.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _component(c) -> int:
    if isinstance(c, (int, np.integer)):
        v = int(c)
        if not 0 <= v < 2 ** 32:
            raise ValueError(f"seed path component {v} out of uint32 range")
        return v
    digest = hashlib.sha256(str(c).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(_component(c) for c in path))


def stream(master_seed: int, *path) -> np.random.Generator:
    """Generator for the stream addressed by ``path`` under ``master_seed``."""
    return np.random.default_rng(seed_sequence(master_seed, *path))
