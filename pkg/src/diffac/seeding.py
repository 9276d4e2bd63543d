"""Deterministic seed derivation for independent random streams.

Every source of randomness in the package is keyed by an integer seed plus a
path of labels (strings or ints). Two streams with different paths are
statistically independent; the same (seed, path) always yields the same
stream, which is what makes collection, training and checkpoint resume
bit-reproducible without serializing opaque generator objects.
"""

from __future__ import annotations

import zlib

import numpy as np

_U32 = 2**32


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) % _U32
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    raise TypeError(f"seed path labels must be int or str, got {type(label)!r}")


def derive_seed(seed: int, *path) -> int:
    """Derive a child seed from a master seed and a label path."""
    keys = (int(seed) % _U32,) + tuple(_label_to_int(p) for p in path)
    ss = np.random.SeedSequence(keys)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_from(seed: int, *path) -> np.random.Generator:
    """numpy Generator for the stream identified by (seed, *path)."""
    return np.random.default_rng(derive_seed(seed, *path))
