"""One master seed, many named deterministic substreams.

Every random draw in the package comes from a generator built here, so a
run is fully reproducible from its single seed.  Stream names hash through
crc32, which is stable across processes (unlike builtin str hashing).
"""

import zlib

import numpy as np


def substream(seed: int, *path) -> np.random.Generator:
    """A generator keyed by the master seed plus a path of names/indices."""
    parts = [int(seed) & 0xFFFFFFFF]
    for item in path:
        if isinstance(item, str):
            parts.append(zlib.crc32(item.encode("utf-8")))
        else:
            parts.append(int(item) & 0xFFFFFFFF)
    return np.random.default_rng(parts)
