"""Named random sub-streams derived from one integer seed.

``stream(seed, "train", epoch, idx)`` hashes the name path with CRC32 and feeds
``[seed, *keys]`` to numpy's SeedSequence, so every consumer gets an independent
PCG64 stream no matter the order (or thread) it is requested from.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
