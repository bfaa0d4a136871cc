"""Deterministic random streams keyed by (seed, labels...).

Every stochastic routine in the package draws from a generator produced
here.  Keys are chained blake2b digests, so a vertex's stream depends only
on the global seed and its path from the root, never on traversal order.
Replica-level parallelism therefore cannot change any sampled value.
"""
from __future__ import annotations

import hashlib

import numpy as np

_DIGEST_SIZE = 16  # 128-bit keys


def _encode(part) -> bytes:
    if isinstance(part, bytes):
        return b"b" + part
    if isinstance(part, str):
        return b"s" + part.encode("utf-8")
    if isinstance(part, (int, np.integer)):
        return b"i" + int(part).to_bytes(16, "little", signed=True)
    raise TypeError(f"unsupported key part {part!r}")


def stream_key(seed: int, *labels) -> bytes:
    """Root key for a named stream."""
    h = hashlib.blake2b(digest_size=_DIGEST_SIZE)
    h.update(_encode(int(seed)))
    for lab in labels:
        h.update(_encode(lab))
    return h.digest()


def child_key(key: bytes, index: int) -> bytes:
    """Key of the index-th child stream (used for per-vertex paths)."""
    h = hashlib.blake2b(key, digest_size=_DIGEST_SIZE)
    h.update(_encode(int(index)))
    return h.digest()


def generator(key: bytes) -> np.random.Generator:
    """PCG64 generator seeded from a stream key."""
    return np.random.Generator(np.random.PCG64(int.from_bytes(key, "little")))


def stream(seed: int, *labels) -> np.random.Generator:
    return generator(stream_key(seed, *labels))
