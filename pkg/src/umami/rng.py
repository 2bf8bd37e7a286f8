"""Deterministic random-stream derivation.

Every stochastic choice in the codebase draws from a stream derived from a
base seed plus a tuple of labels (purpose string, step index, token index,
...). Streams never share state, so any computation can be replayed exactly
from (seed, labels) without threading generator objects through call chains.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(base_seed: int, *labels) -> int:
    """Hash (base_seed, labels) into a 63-bit seed.

    Labels may be ints or strings; the encoding is unambiguous so
    ("a", 1) and ("a1",) derive different seeds.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base_seed)).encode())
    for label in labels:
        h.update(b"|")
        if isinstance(label, bool) or not isinstance(label, (int, np.integer, str)):
            raise TypeError(f"stream label must be int or str, got {label!r}")
        h.update(f"{type(label).__name__ if isinstance(label, str) else 'i'}:{label}".encode())
    return int.from_bytes(h.digest(), "little") & ((1 << 63) - 1)


def torch_generator(base_seed: int, *labels) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(base_seed, *labels))
    return g


def np_generator(base_seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(base_seed, *labels)))
