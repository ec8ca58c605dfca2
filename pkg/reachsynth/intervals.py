"""
Vectorized interval arithmetic on numpy arrays.

An `IntervalArray` holds elementwise lower and upper bounds of the same
shape. Arithmetic broadcasts like numpy, so the same formula can be written
once and evaluated either on float arrays (point evaluation) or on interval
arrays (range enclosure), see `namespace_for`.
"""
import math
from typing import Sequence, Union

import numpy as np

Number = Union[int, float, np.ndarray]

TWO_PI = 2.0 * math.pi


def _zero_nan(a: np.ndarray) -> np.ndarray:
    # 0 * inf is taken as 0 in interval products
    return np.where(np.isnan(a), 0.0, a)


class IntervalArray:
    # numpy defers binary operators to the reflected methods below
    __array_ufunc__ = None

    def __init__(self, lo, hi=None):
        lo = np.asarray(lo, dtype=float)
        hi = lo if hi is None else np.asarray(hi, dtype=float)
        lo, hi = np.broadcast_arrays(lo, hi)
        self.lo = np.array(lo)
        self.hi = np.array(hi)

    @classmethod
    def point(cls, x) -> "IntervalArray":
        return cls(x, x)

    @property
    def shape(self):
        return self.lo.shape

    @property
    def ndim(self):
        return self.lo.ndim

    def __len__(self):
        return len(self.lo)

    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def mid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def mag(self) -> np.ndarray:
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def __getitem__(self, key) -> "IntervalArray":
        return IntervalArray(self.lo[key], self.hi[key])

    def __repr__(self):
        return f"IntervalArray(lo={self.lo!r}, hi={self.hi!r})"

    def _coerce(self, other) -> "IntervalArray":
        if isinstance(other, IntervalArray):
            return other
        return IntervalArray(other, other)

    def __add__(self, other):
        other = self._coerce(other)
        return IntervalArray(self.lo + other.lo, self.hi + other.hi)

    __radd__ = __add__

    def __neg__(self):
        return IntervalArray(-self.hi, -self.lo)

    def __sub__(self, other):
        other = self._coerce(other)
        return IntervalArray(self.lo - other.hi, self.hi - other.lo)

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        if not isinstance(other, IntervalArray):
            c = np.asarray(other, dtype=float)
            with np.errstate(invalid="ignore"):
                a = _zero_nan(self.lo * c)
                b = _zero_nan(self.hi * c)
            return IntervalArray(np.minimum(a, b), np.maximum(a, b))
        with np.errstate(invalid="ignore"):
            p = [
                _zero_nan(self.lo * other.lo),
                _zero_nan(self.lo * other.hi),
                _zero_nan(self.hi * other.lo),
                _zero_nan(self.hi * other.hi),
            ]
        lo = np.minimum(np.minimum(p[0], p[1]), np.minimum(p[2], p[3]))
        hi = np.maximum(np.maximum(p[0], p[1]), np.maximum(p[2], p[3]))
        return IntervalArray(lo, hi)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, IntervalArray):
            raise TypeError("interval division by an interval is not supported")
        return self * (1.0 / np.asarray(other, dtype=float))

    def __pow__(self, n: int):
        return power(self, n)

    def sum(self, axis=None) -> "IntervalArray":
        return IntervalArray(self.lo.sum(axis=axis), self.hi.sum(axis=axis))

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.lo <= x) & (x <= self.hi)


def power(x: IntervalArray, n: int) -> IntervalArray:
    if n < 0:
        raise ValueError("negative interval powers are not supported")
    if n == 0:
        return IntervalArray(np.ones_like(x.lo), np.ones_like(x.hi))
    if n == 1:
        return IntervalArray(x.lo, x.hi)
    a = x.lo ** n
    b = x.hi ** n
    if n % 2:
        return IntervalArray(a, b)
    straddles = (x.lo <= 0.0) & (x.hi >= 0.0)
    lo = np.where(straddles, 0.0, np.minimum(a, b))
    return IntervalArray(lo, np.maximum(a, b))


def cos(x) -> Union[IntervalArray, np.ndarray]:
    if not isinstance(x, IntervalArray):
        return np.cos(x)
    a = np.cos(x.lo)
    b = np.cos(x.hi)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    # maxima of cos at 2k*pi, minima at (2k+1)*pi
    k_max = np.ceil(x.lo / TWO_PI)
    has_max = TWO_PI * k_max <= x.hi
    k_min = np.ceil((x.lo - math.pi) / TWO_PI)
    has_min = TWO_PI * k_min + math.pi <= x.hi
    hi = np.where(has_max, 1.0, hi)
    lo = np.where(has_min, -1.0, lo)
    full = ~np.isfinite(x.lo) | ~np.isfinite(x.hi) | (x.hi - x.lo >= TWO_PI)
    lo = np.where(full, -1.0, lo)
    hi = np.where(full, 1.0, hi)
    return IntervalArray(lo, hi)


def sin(x) -> Union[IntervalArray, np.ndarray]:
    if not isinstance(x, IntervalArray):
        return np.sin(x)
    return cos(x - 0.5 * math.pi)


def stack(items: Sequence, axis: int = -1) -> IntervalArray:
    coerced = [i if isinstance(i, IntervalArray) else IntervalArray(i) for i in items]
    shape = np.broadcast_shapes(*[c.shape for c in coerced])
    lo = np.stack([np.broadcast_to(c.lo, shape) for c in coerced], axis=axis)
    hi = np.stack([np.broadcast_to(c.hi, shape) for c in coerced], axis=axis)
    return IntervalArray(lo, hi)


def concatenate(items: Sequence) -> IntervalArray:
    """Join along the last axis, broadcasting the leading axes."""
    coerced = [i if isinstance(i, IntervalArray) else IntervalArray(i) for i in items]
    lead = np.broadcast_shapes(*[c.shape[:-1] for c in coerced])
    lo = np.concatenate([np.broadcast_to(c.lo, lead + c.shape[-1:]) for c in coerced], axis=-1)
    hi = np.concatenate([np.broadcast_to(c.hi, lead + c.shape[-1:]) for c in coerced], axis=-1)
    return IntervalArray(lo, hi)


def hull(a: IntervalArray, b: IntervalArray) -> IntervalArray:
    return IntervalArray(np.minimum(a.lo, b.lo), np.maximum(a.hi, b.hi))


def matvec(matrix: np.ndarray, x) -> Union[IntervalArray, np.ndarray]:
    """Constant matrix times a batch of (interval) vectors, last axis contracted."""
    matrix = np.asarray(matrix, dtype=float)
    if not isinstance(x, IntervalArray):
        return np.einsum("ij,...j->...i", matrix, x)
    pos = np.clip(matrix, 0.0, None)
    neg = np.clip(matrix, None, 0.0)
    xl = x.lo[..., None, :]
    xh = x.hi[..., None, :]
    with np.errstate(invalid="ignore"):
        lo = (_zero_nan(pos * xl) + _zero_nan(neg * xh)).sum(axis=-1)
        hi = (_zero_nan(pos * xh) + _zero_nan(neg * xl)).sum(axis=-1)
    return IntervalArray(lo, hi)


class _PointOps:
    sin = staticmethod(np.sin)
    cos = staticmethod(np.cos)
    matvec = staticmethod(matvec)

    @staticmethod
    def stack(items, axis=-1):
        arrays = [np.asarray(i, dtype=float) for i in items]
        shape = np.broadcast_shapes(*[a.shape for a in arrays])
        return np.stack([np.broadcast_to(a, shape) for a in arrays], axis=axis)

    @staticmethod
    def concatenate(items):
        arrays = [np.asarray(i, dtype=float) for i in items]
        lead = np.broadcast_shapes(*[a.shape[:-1] for a in arrays])
        return np.concatenate([np.broadcast_to(a, lead + a.shape[-1:]) for a in arrays], axis=-1)


class _IntervalOps:
    sin = staticmethod(sin)
    cos = staticmethod(cos)
    stack = staticmethod(stack)
    concatenate = staticmethod(concatenate)
    matvec = staticmethod(matvec)


POINT_OPS = _PointOps()
INTERVAL_OPS = _IntervalOps()


def namespace_for(*values):
    """Pick point or interval operations depending on the argument types."""
    if any(isinstance(v, IntervalArray) for v in values):
        return INTERVAL_OPS
    return POINT_OPS
