"""Named, hierarchical random streams.

Every random draw in the package flows from a single 64-bit experiment seed
through a stream addressed by a tuple of names (component, prompt, iteration,
...).  Streams with different addresses are statistically independent, and
the same address always yields the same stream, independent of creation
order, process, or platform.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Generator for the stream addressed by `names` under `seed`."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)
