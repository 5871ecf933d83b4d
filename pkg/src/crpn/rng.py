"""Deterministic pseudo-random numbers: splitmix64-seeded xoshiro256++.

Every stochastic choice in the package (weight init, batch sampling, scene
generation) draws from this generator so that a 64-bit seed pins down the
whole run bit-exactly, independent of numpy's RNG internals.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_DOUBLE_SCALE = 1.0 / (1 << 53)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, next_state)."""
    state = (state + _GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    z = z ^ (z >> 31)
    return z, state


def mix_seed(seed: int, index: int) -> int:
    """Derive a per-item seed from a base seed and an item index.

    Used for per-image generation so parallel workers can reproduce any
    single image without replaying the whole stream.
    """
    z, _ = splitmix64((seed ^ ((index + 1) * _GOLDEN)) & _MASK)
    return z


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


class Rng:
    """xoshiro256++ generator with a splitmix64-expanded 64-bit seed."""

    def __init__(self, seed: int):
        self.seed_value = seed & _MASK
        state = self.seed_value
        s = []
        for _ in range(4):
            out, state = splitmix64(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & _MASK, 23) + s0) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Double in [0, 1) with 53 bits of randomness."""
        return (self.next_u64() >> 11) * _DOUBLE_SCALE

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """Integer in [0, n). Uses the floor-of-scaled-double construction."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        return min(int(self.uniform() * n), n - 1)

    def randint_in(self, lo: int, hi: int) -> int:
        """Integer in the inclusive range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        return lo + self.randint(hi - lo + 1)

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        """Gaussian sample via Box-Muller.

        The sine deviate is discarded so that (get_state, set_state) is an
        exact round-trip at any point in the stream.
        """
        u1 = 1.0 - self.uniform()  # (0, 1], keeps log finite
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(u1))
        return mean + std * radius * math.cos(2.0 * math.pi * u2)

    def normals(self, count: int, mean: float = 0.0, std: float = 1.0) -> list[float]:
        return [self.normal(mean, std) for _ in range(count)]

    def sample_without_replacement(self, pool: list[int], k: int) -> list[int]:
        """First k entries of a partial Fisher-Yates shuffle of pool."""
        items = list(pool)
        n = len(items)
        k = min(k, n)
        for i in range(k):
            j = i + self.randint(n - i)
            items[i], items[j] = items[j], items[i]
        return items[:k]

    def shuffle(self, items: list) -> None:
        n = len(items)
        for i in range(n - 1):
            j = i + self.randint(n - i)
            items[i], items[j] = items[j], items[i]

    def get_state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def set_state(self, state: tuple[int, int, int, int]) -> None:
        if len(state) != 4:
            raise ValueError("xoshiro256++ state must have 4 words")
        self._s = [w & _MASK for w in state]
