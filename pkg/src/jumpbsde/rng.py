"""Reproducible random streams split from a single root seed.

Every consumer asks for a stream by ``(purpose, *indices)``.  The stream is a
Philox (counter-based) generator keyed by a SeedSequence whose spawn key is
built from the purpose label and the indices, so the draws seen by e.g. path
block 7 do not depend on how many other blocks were generated before it or on
which thread generated them.

Split scheme (recorded in run reports)::

    key = SeedSequence(root_seed, spawn_key=(crc32(purpose), *indices))
    stream = Generator(Philox(key))
"""

from __future__ import annotations

import zlib

import numpy as np

SPLIT_SCHEME = "Philox(SeedSequence(root_seed, spawn_key=(crc32(purpose), *indices)))"

# Paths are generated in fixed-size blocks; each block owns one stream.
PATH_BLOCK = 1024


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf8"))


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, *indices)``."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose_code(purpose), *map(int, indices)))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, purpose: str, *indices: int) -> int:
    """Derive a 63-bit integer seed, for handing to code that wants an int."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose_code(purpose), *map(int, indices)))
    lo, hi = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return lo | ((hi & 0x7FFFFFFF) << 32)


def block_slices(batch: int, block: int = PATH_BLOCK):
    """Yield ``(block_index, slice)`` covering ``range(batch)``."""
    for k, start in enumerate(range(0, batch, block)):
        yield k, slice(start, min(start + block, batch))
