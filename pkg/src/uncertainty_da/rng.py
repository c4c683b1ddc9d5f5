"""Named random streams split off a single root seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream_seed(root: int, name: str) -> int:
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def stream_rng(root: int, name: str, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode()), *map(int, keys)])
    return np.random.default_rng(ss)
