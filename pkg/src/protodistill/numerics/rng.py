"""Seeded random streams.

Every pipeline stage draws from its own Philox stream keyed by the global
seed and a tuple of names, so adding a stage (or reordering categories)
leaves every other stream untouched.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _name_words(names: tuple) -> list[int]:
    words = []
    for name in names:
        digest = hashlib.sha256(str(name).encode("utf-8")).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return words


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_name_words(names)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *names) -> int:
    """A 63-bit integer seed derived from ``(seed, *names)``."""
    return int(stream(seed, "derive", *names).integers(0, 2**63 - 1))
