"""Counter-based random streams keyed by ``(seed, stream ids...)``."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable integer id for a named stream."""
    return zlib.crc32(name.encode())


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Philox generator for the stream ``(seed, *stream)``.

    String stream components are hashed with :func:`stream_key`, so
    ``make_rng(7, "prior")`` is reproducible across processes.
    """
    words = [int(seed)]
    for s in stream:
        words.append(stream_key(s) if isinstance(s, str) else int(s))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
