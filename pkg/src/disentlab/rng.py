"""Hierarchical seeding: every random stream is named by a path under one root seed."""

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("rng path integers must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Independent generator for ``path`` under ``seed``.

    ``derive_rng(7, "masks", 12)`` always yields the same stream, and differs
    from any other path under the same seed.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
