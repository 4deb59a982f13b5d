"""Portable 64-bit keyed hashing shared by embeddings and fingerprints."""

from __future__ import annotations

import hashlib

# Fixed key; changing it invalidates every stored fixture and embedding cache.
HASH_KEY = b"dispa-v1-hash-key"


def hash64(data: str | bytes) -> int:
    """Keyed BLAKE2b digest truncated to an unsigned 64-bit integer."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    digest = hashlib.blake2b(data, digest_size=8, key=HASH_KEY).digest()
    return int.from_bytes(digest, "little")
