"""Seedable, portable pseudo-random streams.

The core is SplitMix64: state advances by the 64-bit golden-ratio
increment and every output is finalized with two xorshift-multiply
rounds (constants 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). It is a
dozen lines of integer arithmetic, so streams reproduce bit-identically
on any platform or in any language, which is what keeps generated data
and training runs stable across machines.

Uniform doubles take the top 53 bits of one output word; normals use
Box-Muller on two uniforms; bounded integers use rejection sampling.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Deterministic random stream; one instance per independent use."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._state = self.seed
        self._spare_normal: float | None = None

    def spawn(self, *keys: int) -> "SplitMix64":
        """Derive an independent child stream from the original seed.

        The child depends only on (seed, keys), never on how much of
        this stream has been consumed.
        """
        s = _mix(self.seed ^ 0xA3EC647659359ACD)
        for k in keys:
            s = _mix(s ^ _mix(k & _MASK64))
        return SplitMix64(s)

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        return _mix(self._state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53  # in [0, 1)
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n <= 0:
            raise ValueError("randint requires n >= 1")
        bound = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < bound:
                return u % n

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        if self._spare_normal is not None:
            z, self._spare_normal = self._spare_normal, None
            return mu + sigma * z
        u1 = 0.0
        while u1 <= 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * r * math.cos(2.0 * math.pi * u2)

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n), partial Fisher-Yates order."""
        if k > n:
            raise ValueError("cannot sample more indices than available")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
