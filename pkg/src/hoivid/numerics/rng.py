"""Counter-based, splittable random streams.

Each component asks for its own stream with ``stream(seed, "name", ...)``;
there is no module-level generator.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream keys must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *keys) -> np.random.Generator:
    """A Philox generator determined by ``seed`` and the key path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def split(seed: int, n: int, *keys) -> list[np.random.Generator]:
    return [stream(seed, *keys, i) for i in range(n)]
