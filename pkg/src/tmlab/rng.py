"""Counter-based random substreams.

Every random quantity in the lab is drawn from a stream addressed by a path of
keys below the run seed, e.g. ``Streams(seed).child("step", 12, "t")``. Two
streams with the same seed and path always produce the same draws, and streams
with different paths are statistically independent (``numpy.random.SeedSequence``
spawn keys).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: int | float | str) -> int:
    if isinstance(part, (float, np.floating)):
        part = repr(float(part))
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    raise ValueError(f"stream key must be a non-negative int, a float or a str, got {part!r}")


class Streams:
    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed is None or int(seed) < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *parts: int | float | str) -> Streams:
        return Streams(self.seed, self.path + tuple(_key(p) for p in parts))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path)))

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed}, path={self.path})"


def as_streams(rng: Streams | int) -> Streams:
    return rng if isinstance(rng, Streams) else Streams(int(rng))
