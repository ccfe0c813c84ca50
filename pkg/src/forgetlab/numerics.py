"""Dense float64 kernel and deterministic random streams.

Matrices are plain 2-D C-order ``numpy.float64`` arrays. The helpers here
add the contract checks the rest of the package relies on: shape
validation with informative errors, and a guarantee that no NaN or
infinity leaves an operation silently.

Random streams wrap the Philox4x64-10 counter-based generator, keyed by
``SeedSequence(seed, spawn_key=key)``. Identical ``(seed, key)`` pairs
always reproduce the same sequence, and child streams derived with
distinct ids are statistically independent without sharing state.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce ``data`` to a 2-D float64 C-order array, validating shape and finiteness."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.isfinite(m).all():
        bad = np.argwhere(~np.isfinite(m))[0]
        raise NonFiniteError(f"non-finite entry at index {tuple(int(i) for i in bad)}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape checking.

    Summation order is fixed by the BLAS build, so repeated calls with the
    same operands in the same environment are bit-identical.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape[0]}x{a.shape[1]} "
            f"vs {b.shape[0]}x{b.shape[1]}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.isfinite(out).all():
        bad = np.argwhere(~np.isfinite(out))[0]
        raise NonFiniteError(f"matmul produced non-finite entry at {tuple(int(i) for i in bad)}")
    return out


def elementwise(a, f) -> np.ndarray:
    """Apply the scalar function ``f`` to every entry of ``a``.

    Raises :class:`NonFiniteError` naming the first offending index if
    ``f`` produces a NaN or infinity.
    """
    a = np.asarray(a, dtype=np.float64)
    out = np.vectorize(f, otypes=[np.float64])(a)
    finite = np.isfinite(out)
    if not finite.all():
        bad = np.argwhere(~finite)[0]
        raise NonFiniteError(
            f"elementwise function produced non-finite value at index "
            f"{tuple(int(i) for i in bad)}"
        )
    return out


class RandomStream:
    """Seeded Philox stream with cheap derived child streams.

    The generator is Philox4x64-10 (a counter-based PRNG), keyed through
    ``numpy.random.SeedSequence(seed, spawn_key=key)``. The ``key`` tuple
    identifies a stream within one seed; two streams with different keys
    never share state. Uniform doubles use numpy's standard 53-bit
    conversion, so sequences are reproducible wherever the same numpy
    bit-generator is available.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        seed = int(seed)
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        key = tuple(int(k) for k in key)
        if any(k < 0 or k >= 2**32 for k in key):
            raise ValueError(f"stream ids must fit in uint32, got {key}")
        self.seed = seed
        self.key = key
        self._gen = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=key))
        )

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, key={self.key})"

    def child(self, *ids: int) -> "RandomStream":
        """Derive an independent stream identified by ``ids`` under the same seed."""
        return RandomStream(self.seed, self.key + ids)

    def next_uniform(self, lo: float, hi: float) -> float:
        """One double in ``[lo, hi)``; advances the stream."""
        if not lo < hi:
            raise ValueError(f"uniform bounds require lo < hi, got [{lo}, {hi})")
        return float(self._gen.uniform(lo, hi))

    def uniform(self, lo: float, hi: float, size) -> np.ndarray:
        """Array of doubles in ``[lo, hi)``."""
        if not lo < hi:
            raise ValueError(f"uniform bounds require lo < hi, got [{lo}, {hi})")
        return self._gen.uniform(lo, hi, size=size)

    def normal(self, loc: float, scale: float, size) -> np.ndarray:
        return self._gen.normal(loc, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        """A random permutation of ``0..n-1``."""
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices drawn from ``0..n-1`` without replacement."""
        return self._gen.choice(n, size=size, replace=False)
