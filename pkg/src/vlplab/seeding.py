"""Deterministic per-item random streams."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(text: str) -> int:
    """Platform-independent 32-bit key for a string label."""
    return zlib.crc32(text.encode("utf-8"))


def derive_rng(*key) -> np.random.Generator:
    """Generator seeded from a tuple of ints and strings.

    ``derive_rng(seed, epoch, sample_index, view_index)`` gives every
    augmentation its own stream, independent of batch composition or
    processing order.
    """
    words = [stream_key(k) if isinstance(k, str) else int(k) for k in key]
    return np.random.default_rng(words)
