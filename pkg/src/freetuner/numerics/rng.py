"""Portable PRNG: xoshiro256** seeded through splitmix64.

Uniform doubles take the top 53 bits of each output; normals use the
Box-Muller transform on consecutive uniform pairs (cosine branch only), so a
given seed yields the same stream on every platform.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1


def _splitmix64(x: int):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Rng:
    """xoshiro256** generator. ``Rng(seed)`` with the same seed always agrees."""

    def __init__(self, seed: int):
        seed = int(seed) & _MASK
        self.seed = seed
        words = []
        x = seed
        for _ in range(4):
            x, z = _splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill_u64(self.state, out)
        return out

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((2 * n,))
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by multiply-shift on the top 32 bits."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        n = int(np.prod(shape, dtype=np.int64))
        top = (self.next_u64(n) >> np.uint64(32)).astype(np.uint64)
        v = (top * np.uint64(span)) >> np.uint64(32)
        return (v.astype(np.int64) + low).reshape(shape)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this generator's seed and ``key``."""
        _, mixed = _splitmix64((self.seed ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK)) & _MASK)
        return Rng(mixed)
