"""Deterministic counter-based random streams.

All dataset generation, augmentation decisions, and weight initialization
draw from this generator so that a given integer seed produces bit-identical
results on every platform. The core is a 64-bit shift-xor-multiply mixer
(splitmix64 finalizer) applied to ``seed + position * GOLDEN``; the stream is
stateless in the counter, so samples can be produced independently by index.
The exact constants are part of the on-disk format contract (docs/format.md).
"""

from __future__ import annotations

import numpy as np

__all__ = ["mix64", "derive_seed", "Rng"]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def _finalize(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # wraparound is the point
        z = z ^ (z >> _U64(30))
        z = z * _M1
        z = z ^ (z >> _U64(27))
        z = z * _M2
        z = z ^ (z >> _U64(31))
    return z


def mix64(x: int) -> int:
    """Scalar mix of a 64-bit value; used to derive sub-stream seeds."""
    return int(_finalize(np.asarray(x & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)))


def derive_seed(seed: int, *tags: int) -> int:
    """Fold tag values into a seed, giving an independent sub-stream seed."""
    return int(Rng(seed, *tags)._base)


class Rng:
    """Seeded stream of uniforms/normals/integers with an advancing counter.

    ``Rng(seed, *tags)`` derives an independent sub-stream per tag tuple, so
    e.g. ``Rng(seed, domain_id, sample_index)`` gives every sample its own
    reproducible randomness regardless of generation order.
    """

    def __init__(self, seed: int, *tags: int):
        base = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        for t in tags:
            base = _finalize(base ^ _finalize(np.uint64(t & 0xFFFFFFFFFFFFFFFF)))
        self._base = base
        self._pos = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        with np.errstate(over="ignore"):
            return _finalize(self._base + idx * _GOLDEN)

    def floats(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), from the top 53 bits of each word."""
        return (self._raw(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        size = int(np.prod(shape)) if shape else 1
        return (lo + (hi - lo) * self.floats(size)).reshape(shape)

    def normals(self, shape) -> np.ndarray:
        """Box-Muller transform over counter pairs."""
        size = int(np.prod(shape)) if shape else 1
        n = (size + 1) // 2
        u1 = self.floats(n)
        u2 = self.floats(n)
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:size]
        return z.reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n ints uniform in [0, bound); bound must be far below 2**53."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        return np.minimum((self.floats(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via argsort of uniforms."""
        return np.argsort(self.floats(n), kind="stable")

    def chance(self, p: float) -> bool:
        return bool(self.floats(1)[0] < p)
