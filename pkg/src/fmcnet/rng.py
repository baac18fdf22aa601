"""Seedable, portable random source (splitmix-style 64-bit).

Every stochastic choice in the package (parameter init, phantom geometry,
noise, shuffling) draws from this generator so that a seed pins the full
byte stream independently of platform BLAS or numpy version. Outputs are
produced with vectorized uint64 arithmetic; the stream position advances
by exactly one step per 64-bit word.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO53 = float(1 << 53)


class SplitMix64:
    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def _words(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64)
            z = self._state + idx * _GAMMA
            self._state = self._state + np.uint64(n) * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            return z ^ (z >> np.uint64(31))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws in the open interval (low, high)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        bits = (self._words(n) >> np.uint64(11)).astype(np.float64)
        u = (bits + 0.5) / _TWO53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        """Gaussian draws via Box-Muller on uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return (sigma * z).reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n draws from 0..bound-1 (modulo; bias is negligible for small bounds)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self._words(n) % np.uint64(bound)).astype(np.int64)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates; returns a new list, input untouched."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = int(self.integers(1, i + 1)[0])
            out[i], out[j] = out[j], out[i]
        return out
