"""Deterministic, splittable random numbers.

Built on the counter-based Philox generator, so identical seeds give
bit-identical streams on every platform. ``split`` derives statistically
independent child generators from (key, index) without consuming state,
which lets dataset samples, noise draws, and box offsets be generated
in any order (or in parallel) with identical results.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(a, b):
    # splitmix64-style avalanche of (a, b) -> 64-bit key
    z = (a + 0x9E3779B97F4A7C15 * (b + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """Stateful wrapper: identical seed + identical call sequence gives
    bit-identical outputs."""

    def __init__(self, seed, _key=None):
        self.key = _mix(int(seed), 0x5EED) if _key is None else _key
        self._gen = np.random.Generator(np.random.Philox(key=self.key))

    def split(self, index):
        """Child generator for stream ``index``; independent of this
        generator's call history."""
        return Rng(0, _key=_mix(self.key, int(index)))

    def normal(self, shape=(), dtype=np.float32):
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, lo=0.0, hi=1.0, shape=()):
        return self._gen.uniform(lo, hi, size=shape)

    def integers(self, lo, hi, shape=()):
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)
