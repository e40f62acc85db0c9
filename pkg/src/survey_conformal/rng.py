"""Counter-based randomness.

Every random quantity in the package is a pure function of integer keys, so
results never depend on iteration order or on how work is split across
threads.
"""

from __future__ import annotations

import hashlib
from typing import Iterable

import numpy as np

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z = (x + _GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int | str) -> int:
    """Fold integer or string parts into one 64-bit seed."""
    h = 0
    for part in parts:
        if isinstance(part, str):
            part = string_hash(part)
        h = mix64(h ^ (int(part) & MASK64))
    return h


def string_hash(s: str) -> int:
    return int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little")


def id_hashes(ids: Iterable[str]) -> np.ndarray:
    return np.fromiter((string_hash(str(i)) for i in ids), dtype=np.uint64)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def keyed_uniforms(seed: int, keys: np.ndarray, counter: int = 0) -> np.ndarray:
    """Uniform draws in [0, 1), one per key.

    The draw for a key depends only on ``(seed, key, counter)``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    salt = np.uint64(derive_seed(seed, counter))
    with np.errstate(over="ignore"):
        z = _mix64_array(_mix64_array(keys ^ salt))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & MASK64))
