"""Keyed, counter-based random streams.

Every draw site derives its own generator from ``(master seed, purpose tag,
index...)`` so results do not depend on execution order or thread count.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np


def _tag_words(tag: str) -> list[int]:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return [int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little")]


def stream(seed: int, tag: str = "", *index: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, tag, *index)``."""
    key = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF, *_tag_words(tag)]
    key += [int(i) & 0xFFFFFFFF for i in index]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def content_key(indices: Sequence[int]) -> int:
    """64-bit key identifying an index set (order-insensitive)."""
    arr = np.sort(np.asarray(indices, dtype=np.int64))
    digest = hashlib.blake2b(arr.tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer seed from ``rng``."""
    return int(rng.integers(0, 2**63 - 1))
