"""Dense float64 kernel and the seeded random source.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  The helpers
here add the shape checking and the handful of numerically careful routines
(stable softmax, Xavier init) the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


def as_float(x) -> np.ndarray:
    """Array view of ``x``; float64 unless it already carries extended precision."""
    a = np.asarray(x)
    if a.dtype == np.longdouble:
        return a
    return a.astype(DTYPE, copy=False)


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """Input outside the domain of an operation (e.g. an empty vector)."""


class Rng:
    """Seeded random stream backed by the Philox-4x64 counter-based generator.

    Philox output is defined bit-for-bit by its key and counter, so a given
    seed yields the same stream on every platform and numpy version that
    ships the generator.
    """

    ALGORITHM = "philox4x64-10"

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    @classmethod
    def derive(cls, seed: int, *keys: int) -> "Rng":
        """Independent sub-stream for ``(seed, *keys)``, e.g. one per sample index."""
        return cls(np.random.SeedSequence([int(seed), *map(int, keys)]))

    def uniform(self, low: float, high: float, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self.gen.choice(a, size=size, replace=replace)


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array; 1-D input becomes a column."""
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(z):
    # exp of the negative magnitude only, so neither branch overflows
    z = as_float(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _same_shape(name: str, a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{name}: shapes {np.shape(a)} and {np.shape(b)} differ")


def elementwise(op: str, *args):
    """Pointwise op from the fixed set add, sub, hadamard, sigmoid, tanh, scale.

    ``scale`` takes ``(matrix, factor)``; the binary ops require equal shapes.
    """
    if op in ("add", "sub", "hadamard"):
        if len(args) != 2:
            raise TypeError(f"{op} takes two operands")
        a, b = (np.asarray(x, dtype=DTYPE) for x in args)
        _same_shape(op, a, b)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    if op in ("sigmoid", "tanh"):
        if len(args) != 1:
            raise TypeError(f"{op} takes one operand")
        a = np.asarray(args[0], dtype=DTYPE)
        return sigmoid(a) if op == "sigmoid" else np.tanh(a)
    if op == "scale":
        a, k = args
        return np.asarray(a, dtype=DTYPE) * float(k)
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax(v, axis: int = -1) -> np.ndarray:
    v = as_float(v)
    if v.size == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = as_float(v)
    if v.size == 0:
        raise DomainError("log_softmax of an empty vector")
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def rand_init(rng: Rng, rows: int, cols: int, scheme: str = "xavier-uniform") -> np.ndarray:
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"dimensions must be positive, got {rows}x{cols}")
    if scheme == "zeros":
        return np.zeros((rows, cols), dtype=DTYPE)
    if scheme == "ones":
        return np.ones((rows, cols), dtype=DTYPE)
    if scheme == "xavier-uniform":
        bound = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)
    raise ValueError(f"unknown init scheme {scheme!r}")
