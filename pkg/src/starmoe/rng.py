"""Counter-based SplitMix64 generator.

Draw ``i`` (0-based, counted from construction) of a generator with seed ``s``
is ``mix(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix`` is the
SplitMix64 finalizer.  Uniform doubles take the top 53 bits.  Standard normals
use the Box-Muller transform on consecutive pairs of draws ``(u1, u2)`` with
``u1`` in (0, 1]; each pair yields two normals (cosine branch first).

Only uint64 integer arithmetic plus ``log``/``sqrt``/``cos``/``sin`` are
involved, so sequences are identical on any platform with IEEE doubles.
"""
from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Deterministic stream of 64-bit words, uniforms and Gaussians."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        words = self.next_u64(2 * pairs) >> np.uint64(11)
        u1 = (words[0::2].astype(np.float64) + 1.0) * 2.0**-53
        u2 = words[1::2].astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers in [low, high) (floor of scaled uniforms)."""
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)

    def spawn(self, stream: int) -> "SeededRng":
        """Independent child generator keyed by ``stream``; does not advance self."""
        with np.errstate(over="ignore"):
            base = np.array([self.seed], dtype=np.uint64)
            key = _mix(base ^ _mix(np.array([stream + 1], dtype=np.uint64) * _GAMMA))
        return SeededRng(int(key[0]))
