"""Portable seeded random streams.

splitmix64 expands a 64-bit seed into the 256-bit state of a xoshiro256++
generator. Every random draw in the package (synthetic data, parameter
initialisation, shuffles, word dropout, random pairing) goes through this
stream so that results are bit-identical across platforms and languages.

Derived quantities:

* ``uniform()``  -- ``(next() >> 11) * 2**-53`` in [0, 1)
* ``below(n)``   -- rejection sampling on the top bits (unbiased)
* ``normal()``   -- Box-Muller, cosine branch only, two draws per variate
"""

import math

import numpy as np

_MASK = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


def splitmix64(state):
    """Advance a splitmix64 state. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256pp:
    """xoshiro256++ 1.0 seeded from a single 64-bit integer via splitmix64."""

    def __init__(self, seed=0):
        sm = int(seed) & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self):
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

    def uniform(self):
        return (self.next_u64() >> 11) * _INV_2_53

    def below(self, n):
        """Uniform integer in ``[0, n)`` by rejection on the smallest power-of-two mask."""
        if n <= 0:
            raise ValueError("n must be positive")
        if n == 1:
            return 0
        bits = (n - 1).bit_length()
        while True:
            x = self.next_u64() >> (64 - bits)
            if x < n:
                return x

    def normal(self):
        u1 = ((self.next_u64() >> 11) + 1) * _INV_2_53  # (0, 1]
        u2 = (self.next_u64() >> 11) * _INV_2_53
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(_TWO_PI * u2)

    def normals(self, shape):
        """Array of standard normals filled in row-major order."""
        n = int(np.prod(shape)) if shape else 1
        out = np.fromiter((self.normal() for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``, swapping from the top down."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)


def derive_seed(seed, offset):
    """Sub-stream seed: ``seed + offset`` wrapped to 64 bits."""
    return (int(seed) + int(offset)) & _MASK
