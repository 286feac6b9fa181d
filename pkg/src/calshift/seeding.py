"""Deterministic seed derivation.

Every stochastic component takes an explicit 64-bit seed; substreams are
derived by hashing the parent seed together with a label, so independent
consumers never share a stream and reruns are bit-reproducible across
platforms.
"""

import hashlib

import numpy as np


def mix_seed(seed: int, *parts) -> int:
    """Derive a child seed from ``seed`` and any hashable labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "big")


def make_rng(seed: int, *parts) -> np.random.Generator:
    """Generator seeded by ``seed``, optionally mixed with sublabels."""
    if parts:
        seed = mix_seed(seed, *parts)
    return np.random.default_rng(int(seed) & ((1 << 64) - 1))
