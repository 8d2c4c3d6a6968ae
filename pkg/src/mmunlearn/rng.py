"""Splittable, purpose-tagged random streams.

Every stream is a Philox counter-based generator keyed by (seed, tag), so
any module can draw reproducible randomness without coordinating global
state. The tag is hashed, not Python-hashed, to stay stable across runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, tag: str) -> np.random.Generator:
    """Return an independent generator keyed by (seed, tag)."""
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    tag_key = int.from_bytes(digest, "little")
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(tag_key)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
