"""Deterministic pseudo-random number generation.

All randomness in the package flows through `Prng`, a pure-Python
xoshiro256** generator.  State is held explicitly and seeds are threaded
by the caller, so identical seeds yield identical draw sequences on every
platform.  There is no global generator.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15  # splitmix64 increment


class ValidationError(ValueError):
    """Raised when an argument violates a documented precondition."""


def _splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new state, output)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Prng:
    """xoshiro256** generator with a 256-bit state seeded via splitmix64.

    The 64-bit seed is expanded into the four state words with splitmix64,
    which also guarantees a nonzero state for every seed.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        s = self.seed
        state = []
        for _ in range(4):
            s, out = _splitmix64(s)
            state.append(out)
        self.state = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.state
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.state = [s0, s1, s2, s3]
        return result

    def spawn(self, index: int) -> "Prng":
        """Derive an independent child generator for stream `index`.

        The child seed mixes the parent seed with the index through two
        splitmix64 rounds, so distinct indices give unrelated streams.
        """
        x = self.seed ^ ((index + 1) * _GOLDEN & _MASK64)
        x, a = _splitmix64(x)
        _, b = _splitmix64(x ^ a)
        return Prng(b)

    # -- float draws ----------------------------------------------------

    def _unit(self) -> float:
        """Uniform in [0, 1) from the top 53 bits of one raw draw."""
        return (self.next_u64() >> 11) * 2.0**-53

    def _unit_open(self) -> float:
        """Uniform in (0, 1], safe as a log argument."""
        return ((self.next_u64() >> 11) + 1) * 2.0**-53

    def uniform(self, lo: float, hi: float, shape: tuple[int, ...] = ()) -> np.ndarray:
        """Uniform draws over [lo, hi) as a float64 array of `shape`."""
        if not lo < hi:
            raise ValidationError(f"uniform requires lo < hi, got [{lo}, {hi})")
        n = int(np.prod(shape)) if shape else 1
        vals = [lo + (hi - lo) * self._unit() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape)

    def normal(self, mean: float, std: float, shape: tuple[int, ...] = ()) -> np.ndarray:
        """Gaussian draws via Box-Muller; consumes raw draws in pairs."""
        if std <= 0:
            raise ValidationError(f"normal requires std > 0, got {std}")
        n = int(np.prod(shape)) if shape else 1
        vals = []
        for _ in range((n + 1) // 2):
            u1 = self._unit_open()
            u2 = self._unit()
            r = math.sqrt(-2.0 * math.log(u1))
            vals.append(r * math.cos(2.0 * math.pi * u2))
            vals.append(r * math.sin(2.0 * math.pi * u2))
        arr = np.array(vals[:n], dtype=np.float64) * std + mean
        return arr.reshape(shape)

    # -- integer draws ---------------------------------------------------

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n), bias-free via rejection."""
        if n <= 0:
            raise ValidationError(f"randint requires n > 0, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
