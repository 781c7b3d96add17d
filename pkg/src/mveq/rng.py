"""Counter-based deterministic RNG used for every random choice in the toolkit.

The generator is the splitmix64 finalizer applied to a counter: draw i of
stream s under seed q is

    mix64(base(q, s) + (i + 1) * GOLDEN)      with base(q, s) = mix64(q ^ mix64((s + 1) * GOLDEN))

Integer-only state makes the sequence reproducible bit-for-bit in any
language; tests/test_rng.py pins reference vectors. Bounded integers use the
multiply-shift trick ((u64 * n) >> 64) instead of float math so they are also
exactly portable.
"""

from __future__ import annotations

import math

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """splitmix64 finalizer (Stafford variant 13)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Deterministic stream of draws for a (seed, stream) pair."""

    def __init__(self, seed: int, stream: int = 0):
        self._base = mix64((seed & _MASK) ^ mix64(((stream + 1) * _GOLDEN) & _MASK))
        self._counter = 0

    def fork(self, stream: int) -> "SplitMix64":
        """Independent child stream; does not consume draws from self."""
        return SplitMix64(self._base, stream)

    def next_u64(self) -> int:
        self._counter += 1
        return mix64((self._base + self._counter * _GOLDEN) & _MASK)

    def bulk_u64(self, count: int):
        """count draws as a uint64 array; same sequence as next_u64."""
        import numpy as np

        ctr = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        z = np.uint64(self._base) + ctr * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n: int) -> int:
        """Integer in [0, n), multiply-shift bounded (no modulo bias worth
        caring about at n << 2^64, and exactly portable)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def normal(self) -> float:
        """One standard normal draw (Box-Muller, cosine branch).

        Always consumes exactly two u64 draws so call counts stay aligned.
        """
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53  # (0, 1]
        u2 = (self.next_u64() >> 11) * 2.0**-53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def normal_array(self, count: int):
        """count standard normal draws, bitwise identical to normal() calls."""
        import numpy as np

        raw = self.bulk_u64(2 * count)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), partial Fisher-Yates order."""
        if k > n:
            raise ValueError(f"cannot sample {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        n = len(items)
        for i in range(n - 1):
            j = i + self.randint(n - i)
            items[i], items[j] = items[j], items[i]
