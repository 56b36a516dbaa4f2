"""Dense float64 tensors and a splittable, counter-based random source.

Every other module works in terms of these two types. Tensors are
immutable after construction (the underlying numpy buffer is marked
read-only), so they are safe to share across threads. Kernels never
mutate their inputs.

Numerics are 64-bit throughout: the test suite leans on tight
finite-difference tolerances and desk-scale memory is cheap.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised for invalid shapes or shape mismatches between operands."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("invalid shape: rank must be >= 1")
    if any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: extents must be >= 1")
    return shape


class Tensor:
    """Immutable n-dimensional float64 array, row-major, rank >= 1."""

    __slots__ = ("_data",)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_shape(arr.shape)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Wrap a buffer we own, without copying. Internal use only."""
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        t = object.__new__(cls)
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        """Read-only numpy view of the buffer (row-major)."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor._wrap(self._data.reshape(_check_shape(shape)).copy())

    def copy(self) -> "Tensor":
        return Tensor._wrap(self._data.copy())

    def tolist(self):
        return self._data.tolist()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def _binop(self, other, fn) -> "Tensor":
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ShapeError(f"shape mismatch: {self.shape} vs {other.shape}")
            return Tensor._wrap(fn(self._data, other._data))
        return Tensor._wrap(fn(self._data, float(other)))

    def __add__(self, other):
        return self._binop(other, np.add)

    def __radd__(self, other):
        return self._binop(other, np.add)

    def __sub__(self, other):
        return self._binop(other, np.subtract)

    def __mul__(self, other):
        return self._binop(other, np.multiply)

    def __rmul__(self, other):
        return self._binop(other, np.multiply)

    def __neg__(self):
        return Tensor._wrap(-self._data)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def tensor(values) -> Tensor:
    return Tensor(values)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(_check_shape(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(_check_shape(shape)))


def full(shape: Sequence[int], value: float) -> Tensor:
    return Tensor._wrap(np.full(_check_shape(shape), float(value)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product. No broadcasting."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"shape mismatch: {a.shape} @ {b.shape}")
    return Tensor._wrap(a.data @ b.data)


def normal(rng: "Rng", shape: Sequence[int], mu: float = 0.0, sigma: float = 1.0) -> Tensor:
    """I.i.d. Gaussian samples. sigma == 0 degenerates to a constant mu."""
    return Tensor._wrap(rng.normal(_check_shape(shape), mu=mu, sigma=sigma))


def _tag_to_int(tag) -> int:
    """Stable 64-bit integer for a child-stream tag (ints pass through)."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Deterministic random source backed by the Philox counter-based generator.

    A stream is identified by (seed, path). ``child(*tags)`` derives an
    independent stream whose output depends only on the seed and the tag
    path, never on how many draws the parent has made. That keeps
    augmentation, initialization, and corruption streams reproducible
    regardless of call interleaving.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: Iterable = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.path = tuple(_tag_to_int(t) for t in path)
        ss = np.random.SeedSequence((self.seed, *self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *tags) -> "Rng":
        """Independent stream derived from this stream's identity plus tags."""
        return Rng(self.seed, (*self.path, *tags))

    def normal(self, shape: Sequence[int], mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        if sigma < 0:
            raise ValueError(f"negative sigma: {sigma}")
        return self._gen.normal(loc=mu, scale=sigma, size=_check_shape(shape))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def beta(self, a: float, b: float, size=None):
        return self._gen.beta(a, b, size=size)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
