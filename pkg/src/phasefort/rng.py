"""Deterministic random number generation.

Every random choice in the library (weight init, phase sampling, fooling
partners, dropout masks, data jitter) flows through an `Rng` owned by the
caller. The generator is Philox 4x64, a counter-based algorithm whose output
for a given seed is identical across platforms and numpy versions; this is
part of the reproducibility contract, so do not swap the bit generator
without bumping the checkpoint format version.

Rng instances are not shared between logical threads. Derive independent
child generators with `child()`, which hashes the parent seed with a key.
"""

from __future__ import annotations

import numpy as np

_CHILD_MIX = 0x9E3779B97F4A7C15  # splitmix64 increment


def _mix64(z: int) -> int:
    """splitmix64 finalizer; decorrelates derived seeds."""
    z &= 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class Rng:
    """Seeded Philox generator with explicit child derivation."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, key: int) -> "Rng":
        """Fork a statistically independent generator; `key` picks the stream."""
        return Rng(_mix64(self.seed + _CHILD_MIX * (int(key) + 1)))

    def uniform(self, lo: float, hi: float, shape=(), dtype=np.float64) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"uniform bounds must satisfy lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=shape).astype(dtype, copy=False)

    def gaussian(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape).astype(dtype, copy=False)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        """Boolean mask, True with probability p."""
        return self._gen.uniform(0.0, 1.0, size=shape) < p


def sample_uniform(rng: Rng, lo: float, hi: float, shape, dtype=np.float64) -> np.ndarray:
    return rng.uniform(lo, hi, shape, dtype)


def sample_gaussian(rng: Rng, shape, dtype=np.float64) -> np.ndarray:
    return rng.gaussian(shape, dtype)
