"""Deterministic random numbers built on counter-mode SplitMix64.

Every stochastic choice in the toolkit (phantom voxels, dataset splits,
weight init, batch order) draws from this module so that a given seed
produces byte-identical results on any platform, independent of the host
RNG implementation.
"""

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    with np.errstate(over="ignore"):  # wraparound mod 2^64 is the algorithm
        z = (x + _GOLDEN) & _MASK
        z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _MASK
        z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _MASK
        return z ^ (z >> np.uint64(31))


def hash_seeds(*parts: int) -> int:
    """Combine integers into a single derived seed (order-sensitive)."""
    h = np.uint64(0)
    with np.errstate(over="ignore"):
        for p in parts:
            h = _splitmix64(np.uint64(h) ^ (np.uint64(p & 0xFFFFFFFFFFFFFFFF) * _MIX1 & _MASK))
    return int(h)


class DetRng:
    """Counter-based generator: value i of stream `seed` is splitmix64(seed, i)."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _splitmix64(self.seed ^ (idx * _GOLDEN & _MASK))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform floats in [low, high) with 53-bit resolution."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        out = low + (high - low) * u
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u1 = np.maximum(u1, 1e-300)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by 64-bit multiply-shift reduction."""
        if high <= low:
            raise ValueError("empty integer range")
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        # floor(raw * span / 2^64) without 128-bit ints: use float64 on the top 53 bits
        top = (self._raw(n) >> np.uint64(11)).astype(np.float64)
        vals = low + (top * (float(span) / (1 << 53))).astype(np.int64)
        vals = np.minimum(vals, high - 1)
        return vals.reshape(shape) if shape else int(vals[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def shuffled(self, items):
        order = self.permutation(len(items))
        return [items[i] for i in order]
