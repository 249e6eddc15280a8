"""Stable seed derivation.

Instance seeds are the first 8 bytes (little-endian) of
``blake2b(f"{master_seed}/{namespace}/{index}", digest_size=8)``, so any
implementation can regenerate the exact instance sets.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stable_seed(master_seed: int, namespace: str, index: int) -> int:
    key = f"{int(master_seed)}/{namespace}/{int(index)}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def instance_rng(master_seed: int, namespace: str, index: int) -> np.random.Generator:
    return np.random.default_rng(stable_seed(master_seed, namespace, index))
