"""
Boxes, uniform partitions and the interval-preserving affine map.

Boxes are immutable axis-aligned interval vectors. An empty box is the
distinct `EMPTY` value, never a box with crossed bounds. Unbounded
coordinates use +/-inf.
"""
import itertools
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from reachsynth.errors import DimensionError
from reachsynth.intervals import IntervalArray, matvec

logger = logging.getLogger(__name__)


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(-1)
    arr.setflags(write=False)
    return arr


class EmptyBox:
    """The empty set; returned where a box operation has no solution."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    is_empty = True

    def __repr__(self):
        return "EMPTY"

    def __bool__(self):
        return False


EMPTY = EmptyBox()


class Box:
    __slots__ = ("lo", "hi")
    is_empty = False

    def __init__(self, lo: Sequence[float], hi: Sequence[float]):
        lo = _frozen(lo)
        hi = _frozen(hi)
        if lo.shape != hi.shape:
            raise DimensionError(f"box bounds have different lengths {lo.size} and {hi.size}")
        if lo.size == 0:
            raise DimensionError("box must have at least one dimension")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError(f"crossed box bounds {lo} > {hi}; use EMPTY for empty sets")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def __setattr__(self, key, value):
        raise AttributeError("Box is immutable")

    @classmethod
    def from_bounds(cls, lo: Sequence[Optional[float]], hi: Sequence[Optional[float]]) -> "Box":
        """Build a box where None means unbounded."""
        lo = [-np.inf if v is None else v for v in lo]
        hi = [np.inf if v is None else v for v in hi]
        return cls(lo, hi)

    @classmethod
    def point(cls, x: Sequence[float]) -> "Box":
        return cls(x, x)

    @classmethod
    def cube(cls, lo: float, hi: float, dim: int) -> "Box":
        return cls([lo] * dim, [hi] * dim)

    @classmethod
    def unbounded(cls, dim: int) -> "Box":
        return cls([-np.inf] * dim, [np.inf] * dim)

    @property
    def dim(self) -> int:
        return self.lo.size

    def __repr__(self):
        parts = " x ".join(f"[{l:.6g}, {h:.6g}]" for l, h in zip(self.lo, self.hi))
        return f"Box({parts})"

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes()))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def is_bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi)))

    def bounded_dims(self) -> np.ndarray:
        return np.isfinite(self.lo) | np.isfinite(self.hi)

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float)

    def contains_point(self, x) -> Union[bool, np.ndarray]:
        x = np.asarray(x, dtype=float)
        inside = np.all((self.lo <= x) & (x <= self.hi), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def as_interval(self) -> IntervalArray:
        return IntervalArray(self.lo, self.hi)

    def intersection(self, other: "Box") -> Union["Box", EmptyBox]:
        return box_intersection(self, other)

    def clip_to(self, other: "Box") -> "Box":
        """Intersect with `other`; raises if the result is empty."""
        clipped = box_intersection(self, other)
        if clipped is EMPTY:
            raise ValueError(f"{self} does not meet {other}")
        return clipped

    def select(self, dims: Sequence[int]) -> "Box":
        dims = list(dims)
        return Box(self.lo[dims], self.hi[dims])

    def to_json(self) -> dict:
        return {
            "lo": [None if np.isinf(v) else float(v) for v in self.lo],
            "hi": [None if np.isinf(v) else float(v) for v in self.hi],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Box":
        return cls.from_bounds(data["lo"], data["hi"])


def _check_same_dim(a: Box, b: Box):
    if a.dim != b.dim:
        raise DimensionError(f"box dimensions differ: {a.dim} vs {b.dim}")


def _check_eps(X: Box, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=float).reshape(-1)
    if eps.size != X.dim:
        raise DimensionError(f"eps has length {eps.size}, box has dimension {X.dim}")
    if np.any(eps < 0):
        raise ValueError("eps must be non-negative")
    return eps


def box_expand(X: Box, eps) -> Box:
    eps = _check_eps(X, eps)
    return Box(X.lo - eps, X.hi + eps)


def box_shrink(X: Box, eps) -> Union[Box, EmptyBox]:
    eps = _check_eps(X, eps)
    lo = X.lo + eps
    hi = X.hi - eps
    if np.any(lo > hi):
        return EMPTY
    return Box(lo, hi)


def box_intersects(A: Box, B: Box) -> bool:
    if A is EMPTY or B is EMPTY:
        return False
    _check_same_dim(A, B)
    return bool(np.all((A.lo <= B.hi) & (B.lo <= A.hi)))


def box_contains(A: Box, B: Box) -> bool:
    """True iff B is a subset of A."""
    if B is EMPTY:
        return True
    if A is EMPTY:
        return False
    _check_same_dim(A, B)
    return bool(np.all((A.lo <= B.lo) & (B.hi <= A.hi)))


def box_intersection(A: Box, B: Box) -> Union[Box, EmptyBox]:
    if A is EMPTY or B is EMPTY:
        return EMPTY
    _check_same_dim(A, B)
    lo = np.maximum(A.lo, B.lo)
    hi = np.minimum(A.hi, B.hi)
    if np.any(lo > hi):
        return EMPTY
    return Box(lo, hi)


def box_product(*boxes: Box) -> Box:
    return Box(np.concatenate([b.lo for b in boxes]), np.concatenate([b.hi for b in boxes]))


class PartitionGrid:
    """
    Uniform partition of a bounded box.

    Cells are flattened row-major with dimension 0 slowest. Index
    `total_cells` is the `Out` symbol. Each cell is half-open [lo, hi) except
    along the domain's upper face, where it is closed.
    """

    def __init__(self, domain: Box, cells_per_dim: Sequence[int]):
        if not domain.is_bounded():
            raise ValueError(f"grid domain must be bounded, got {domain}")
        cells = np.array(cells_per_dim, dtype=np.int64).reshape(-1)
        if cells.size != domain.dim:
            raise DimensionError(f"cells_per_dim has length {cells.size}, domain has dimension {domain.dim}")
        if np.any(cells < 1):
            raise ValueError("cells_per_dim must be positive")
        cells.setflags(write=False)
        self.domain = domain
        self.cells_per_dim = cells
        self.total_cells = int(np.prod(cells))
        self.widths = domain.widths() / cells
        # strides for row-major flattening, dimension 0 slowest
        self._strides = np.array([int(np.prod(cells[i + 1:])) for i in range(cells.size)], dtype=np.int64)

    @property
    def out(self) -> int:
        return self.total_cells

    @property
    def dim(self) -> int:
        return self.domain.dim

    def __repr__(self):
        return f"PartitionGrid({self.domain}, cells={self.cells_per_dim.tolist()})"

    def flat_index(self, multi: np.ndarray) -> np.ndarray:
        return np.asarray(multi, dtype=np.int64) @ self._strides

    def multi_index(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        return (flat[..., None] // self._strides) % self.cells_per_dim

    def cell_of(self, x) -> Union[int, np.ndarray]:
        """Cell index of each point, `out` for points outside the domain."""
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 1
        pts = np.atleast_2d(x)
        if pts.shape[-1] != self.dim:
            raise DimensionError(f"point has dimension {pts.shape[-1]}, grid has {self.dim}")
        inside = self.domain.contains_point(pts)
        inside = np.atleast_1d(inside)
        with np.errstate(invalid="ignore"):
            idx = np.floor((pts - self.domain.lo) / self.widths)
        idx = np.nan_to_num(idx, nan=0.0, posinf=0.0, neginf=0.0).astype(np.int64)
        idx = np.clip(idx, 0, self.cells_per_dim - 1)
        flat = np.where(inside, self.flat_index(idx), self.out)
        return int(flat[0]) if scalar else flat

    def cell_boxes(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        multi = self.multi_index(indices)
        lo = self.domain.lo + multi * self.widths
        hi = self.domain.lo + (multi + 1) * self.widths
        # exact upper face, avoids rounding past the domain
        hi = np.where(multi == self.cells_per_dim - 1, self.domain.hi, hi)
        return lo, hi

    def cell_box(self, index: int) -> Box:
        if not 0 <= index < self.total_cells:
            raise IndexError(f"cell index {index} outside [0, {self.total_cells})")
        lo, hi = self.cell_boxes(index)
        return Box(lo, hi)

    def cell_center(self, indices) -> np.ndarray:
        lo, hi = self.cell_boxes(indices)
        return 0.5 * (lo + hi)

    def index_ranges(self, lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Per-dimension cell index ranges of closed boxes clipped to the domain.

        Returns (first, last, escapes) where `escapes` flags boxes not
        contained in the domain. A bound lying exactly on an interior grid
        line touches the cells on both sides of it.
        """
        lo = np.atleast_2d(lo)
        hi = np.atleast_2d(hi)
        escapes = np.any((lo < self.domain.lo) | (hi > self.domain.hi), axis=-1)
        disjoint = np.any((hi < self.domain.lo) | (lo > self.domain.hi), axis=-1)
        rel_lo = (np.clip(lo, self.domain.lo, self.domain.hi) - self.domain.lo) / self.widths
        rel_hi = (np.clip(hi, self.domain.lo, self.domain.hi) - self.domain.lo) / self.widths
        first = np.floor(rel_lo).astype(np.int64)
        last = np.floor(rel_hi).astype(np.int64)
        first = np.clip(first, 0, self.cells_per_dim - 1)
        last = np.clip(last, 0, self.cells_per_dim - 1)
        first = np.where(disjoint[:, None], 1, first)
        last = np.where(disjoint[:, None], 0, last)
        return first, last, escapes | disjoint

    def cells_intersecting(self, box: Box) -> List[int]:
        first, last, _ = self.index_ranges(box.lo, box.hi)
        first, last = first[0], last[0]
        if np.any(first > last):
            return []
        ranges = [range(f, l + 1) for f, l in zip(first, last)]
        return sorted(int(self.flat_index(np.array(m))) for m in itertools.product(*ranges))

    def to_json(self) -> dict:
        return {"domain": self.domain.to_json(), "cells_per_dim": self.cells_per_dim.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "PartitionGrid":
        return cls(Box.from_json(data["domain"]), data["cells_per_dim"])


def cell_of(G: PartitionGrid, x) -> Union[int, np.ndarray]:
    return G.cell_of(x)


class AffineMap:
    """pi(xhat, uhat) = P [xhat; uhat] + Omega with at most one non-zero per row of P."""

    def __init__(self, P, Omega, nhat_x: int, nhat_u: int):
        P = np.array(P, dtype=float)
        Omega = np.array(Omega, dtype=float).reshape(-1)
        if P.ndim != 2 or P.shape[1] != nhat_x + nhat_u:
            raise DimensionError(f"P must have {nhat_x + nhat_u} columns, got shape {P.shape}")
        if Omega.size != P.shape[0]:
            raise DimensionError(f"Omega has length {Omega.size}, P has {P.shape[0]} rows")
        nonzero = np.count_nonzero(P, axis=1)
        if np.any(nonzero > 1):
            rows = np.flatnonzero(nonzero > 1).tolist()
            raise ValueError(f"P rows {rows} have more than one non-zero entry")
        P.setflags(write=False)
        Omega.setflags(write=False)
        self.P = P
        self.Omega = Omega
        self.nhat_x = nhat_x
        self.nhat_u = nhat_u

    @classmethod
    def stacking(cls, nhat_x: int, nhat_u: int) -> "AffineMap":
        n = nhat_x + nhat_u
        return cls(np.eye(n), np.zeros(n), nhat_x, nhat_u)

    @property
    def n_x(self) -> int:
        return self.P.shape[0]

    @property
    def state_part(self) -> np.ndarray:
        return self.P[:, :self.nhat_x]

    @property
    def input_part(self) -> np.ndarray:
        return self.P[:, self.nhat_x:]

    def apply(self, xhat, uhat) -> np.ndarray:
        xhat = np.asarray(xhat, dtype=float)
        uhat = np.asarray(uhat, dtype=float)
        batch = np.broadcast_shapes(xhat.shape[:-1], uhat.shape[:-1])
        z = np.concatenate([np.broadcast_to(xhat, batch + xhat.shape[-1:]),
                            np.broadcast_to(uhat, batch + uhat.shape[-1:])], axis=-1)
        return z @ self.P.T + self.Omega

    def apply_box(self, xhat_box: Box, uhat_box: Box) -> Box:
        image = IntervalArray(np.concatenate([xhat_box.lo, uhat_box.lo]),
                              np.concatenate([xhat_box.hi, uhat_box.hi]))
        out = matvec(self.P, image) + self.Omega
        return Box(out.lo, out.hi)

    def to_json(self) -> dict:
        return {"P": self.P.tolist(), "Omega": self.Omega.tolist()}


def preimage_pi(pi: AffineMap, X: Box, nhat_x: int, nhat_u: int):
    """
    Interval preimage {(xhat, uhat) | pi(xhat, uhat) in X}.

    Returns (xhat_box, uhat_box), or (EMPTY, EMPTY) when a constant row of pi
    falls outside X. Coordinates no row constrains are unbounded.
    """
    if nhat_x != pi.nhat_x or nhat_u != pi.nhat_u:
        raise DimensionError("abstract dimensions do not match the affine map")
    if X.dim != pi.n_x:
        raise DimensionError(f"X has dimension {X.dim}, pi maps into dimension {pi.n_x}")
    n = nhat_x + nhat_u
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for i, row in enumerate(pi.P):
        nz = np.flatnonzero(row)
        if nz.size == 0:
            if not (X.lo[i] <= pi.Omega[i] <= X.hi[i]):
                logger.debug(f"constant row {i} of pi lies outside X, preimage is empty")
                return EMPTY, EMPTY
            continue
        j = nz[0]
        p = row[j]
        a = (X.lo[i] - pi.Omega[i]) / p
        b = (X.hi[i] - pi.Omega[i]) / p
        if p < 0:
            a, b = b, a
        lo[j] = max(lo[j], a)
        hi[j] = min(hi[j], b)
    if np.any(lo > hi):
        return EMPTY, EMPTY
    return Box(lo[:nhat_x], hi[:nhat_x]), Box(lo[nhat_x:], hi[nhat_x:])
