"""Seeded, platform-independent random number generation.

Implements xoshiro256** seeded through splitmix64, using the reference
constants of both generators, so that every stream is reproducible
bit-for-bit across runs, interpreters, and platforms. All model
initialisation, dataset generation, and layer sampling goes through
:class:`SeededRng`; nothing in the package touches global RNG state.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1

# splitmix64 reference constants
_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MIX1 = 0xBF58476D1CE4E5B9
_SM_MIX2 = 0x94D049BB133111EB


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + _SM_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _SM_MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _SM_MIX2) & _MASK64
    z ^= z >> 31
    return state, z


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class SeededRng:
    """xoshiro256** stream; identical seed gives an identical stream."""

    __slots__ = ("seed", "_s0", "_s1", "_s2", "_s3", "_spare")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        st = self.seed
        st, self._s0 = _splitmix64(st)
        st, self._s1 = _splitmix64(st)
        st, self._s2 = _splitmix64(st)
        st, self._s3 = _splitmix64(st)
        self._spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal via Box-Muller; consumes two uniforms per pair."""
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        # shift into (0, 1] so log() is always finite
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def randint(self, bound: int) -> int:
        """Unbiased integer in [0, bound) by rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        x = self.next_u64()
        while x >= limit:
            x = self.next_u64()
        return x % bound

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        self.shuffle(items)
        return items

    def normal_matrix(self, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
        """Row-major matrix of i.i.d. N(0, scale^2) draws."""
        out = np.empty((rows, cols), dtype=np.float64)
        flat = out.reshape(-1)
        for i in range(rows * cols):
            flat[i] = self.normal() * scale
        return out

    def derive(self, tag: int) -> "SeededRng":
        """Independent child stream; deterministic in (seed, tag)."""
        _, mixed = _splitmix64((self.seed ^ (tag & _MASK64)) & _MASK64)
        return SeededRng(mixed)
