"""Seeded, splittable random number generation.

All randomness in the package flows through :class:`SeededRng`; no module
reads ambient entropy. Streams are independent counter-based Philox
generators keyed by ``(seed, stream)``, so the same seed, stream and call
sequence reproduces identical outputs bit-exactly. Normal deviates use the
Box-Muller transform on Philox uniforms, which keeps the draw count per
call deterministic.
"""

from __future__ import annotations

import numpy as np

_TWO_PI = 2.0 * np.pi


class SeededRng:
    """Deterministic random stream identified by (seed, stream)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream],
                                          dtype=np.uint64)))
        self._next_child = 1

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream})"

    def split(self, stream: int) -> "SeededRng":
        """A fresh stream with the same seed and an explicit stream id."""
        return SeededRng(self.seed, stream)

    def spawn(self) -> "SeededRng":
        """A fresh stream derived from this one; ids never collide."""
        child = SeededRng(self.seed, (self.stream << 16) + self._next_child)
        self._next_child += 1
        return child

    def uniform(self, shape=()) -> np.ndarray:
        """i.i.d. U[0, 1) of the given shape."""
        return self._gen.random(size=shape, dtype=np.float64)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """i.i.d. integers in [low, high)."""
        return self._gen.integers(low, high, size=shape)

    def gaussian(self, shape=()) -> np.ndarray:
        """i.i.d. standard normals via Box-Muller on Philox uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        if n == 0:
            return np.empty(shape, dtype=np.float64)
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(size=pairs, dtype=np.float64)  # (0, 1]
        u2 = self._gen.random(size=pairs, dtype=np.float64)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        out = z[:n]
        return out.reshape(shape) if shape else out[0]

    def shuffle_index(self, n: int) -> np.ndarray:
        """A random permutation of range(n)."""
        return self._gen.permutation(n)
