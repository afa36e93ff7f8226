"""Counter-based deterministic random numbers.

Philox (a counter-based generator) keyed by ``(seed, stream)`` supplies the
uniform draws; Gaussians come from Box-Muller on top of those uniforms so the
normal sampler does not depend on numpy's ziggurat implementation.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic generator identified by a 64-bit seed and a stream id."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self._bitgen = np.random.Philox(key=key)
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def spawn(self, stream: int) -> "Rng":
        """Independent generator sharing the seed, on another stream."""
        return Rng(self.seed, stream)

    def uniform(self, size) -> np.ndarray:
        """Float64 uniforms in [0, 1)."""
        return self._gen.random(size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def normal(self, size, stddev: float = 1.0) -> np.ndarray:
        """Float64 Gaussian draws via the Box-Muller transform."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return (z[:n] * stddev).reshape(shape)
