"""Counter-based pseudo-random numbers.

A stream is fully determined by a 64-bit key and a 64-bit counter, so any
draw can be reproduced from the pair alone, on any platform.  The stream is
the splitmix64 sequence: output i is the splitmix64 finalizer applied to
key + (i + 1) * GAMMA, all modulo 2**64.  Splitting hands out a child key
drawn from the parent stream, which advances the parent counter by one.
"""
from __future__ import annotations

import numpy as np

__all__ = ["Rng"]

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1
_INV_2_53 = 1.0 / float(1 << 53)


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Splittable counter-based generator.

    Identical (key, counter) pairs produce identical draws.  All integer
    arithmetic is done in uint64 with silent wraparound.
    """

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = int(key) & _U64_MASK
        self.counter = int(counter) & _U64_MASK

    def __repr__(self) -> str:
        return f"Rng(key={self.key:#x}, counter={self.counter})"

    def _raw(self, n: int) -> np.ndarray:
        """Next n uint64 stream values; advances the counter by n."""
        if n < 0:
            raise ValueError(f"draw count must be >= 0, got {n}")
        idx = (np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)) * _GAMMA
        self.counter = (self.counter + n) & _U64_MASK
        return _finalize(np.uint64(self.key) + idx)

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def split(self) -> "Rng":
        """Child generator with an independent key; advances this stream by one."""
        return Rng(self.next_u64())

    def uniform(self, shape=(), dtype=None) -> np.ndarray:
        """Draws in [0, 1), derived from the top 53 bits of each stream value."""
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        shape = tuple(int(s) for s in shape)
        n = 1
        for s in shape:
            if s < 0:
                raise ValueError(f"negative dimension in shape {shape}")
            n *= s
        u = self._raw(n)
        x = (u >> np.uint64(11)).astype(np.float64) * _INV_2_53
        x = x.reshape(shape)
        if dtype is not None:
            x = x.astype(dtype)
        return x

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high); uses the uniform stream."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)
