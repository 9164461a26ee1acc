"""Seed tree: every random stream is derived from one master seed.

``derive_seed(seed, *tags)`` hashes the decimal seed and the tags joined by
``/`` with BLAKE2b (8-byte digest, little-endian) and keeps the low 63 bits,
e.g. ``derive_seed(0, "train", 3)`` hashes the UTF-8 string ``"0/train/3"``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    key = "/".join([str(int(seed))] + [str(t) for t in tags]).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def rng_for(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
