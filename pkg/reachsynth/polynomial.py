"""
Vector-valued multivariate polynomials over named variable groups.

A `PolynomialMap` stores an exponent matrix (terms x variables) and a
coefficient matrix (terms x outputs). Variables are laid out group by
group in the order of `GROUPS`. Products, derivatives and substitutions
go through sympy; evaluation stays on the arrays.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy as sp

from reachsynth.intervals import IntervalArray, power

logger = logging.getLogger(__name__)

GROUPS = ("t", "e", "xhat", "uhat", "w", "what")


class VariableLayout:
    def __init__(self, **arities: int):
        unknown = set(arities) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown variable groups {sorted(unknown)}")
        self.arities = {g: int(arities.get(g, 0)) for g in GROUPS}
        self.arities["t"] = int(arities.get("t", 1))
        if self.arities["t"] != 1:
            raise ValueError("the time group has exactly one variable")
        self.slices = {}
        start = 0
        for g in GROUPS:
            self.slices[g] = slice(start, start + self.arities[g])
            start += self.arities[g]
        self.size = start
        names = [g if g == "t" else f"{g}{i}" for g in GROUPS for i in range(self.arities[g])]
        self.symbols: Tuple[sp.Symbol, ...] = tuple(sp.symbols(names, real=True))

    def __eq__(self, other):
        return isinstance(other, VariableLayout) and self.arities == other.arities

    def __hash__(self):
        return hash(tuple(self.arities.items()))

    def __repr__(self):
        inner = ", ".join(f"{g}={n}" for g, n in self.arities.items() if n)
        return f"VariableLayout({inner})"

    def index(self, group: str, i: int = 0) -> int:
        if not 0 <= i < self.arities[group]:
            raise IndexError(f"variable {group}[{i}] outside arity {self.arities[group]}")
        return self.slices[group].start + i

    def symbol(self, group: str, i: int = 0) -> sp.Symbol:
        return self.symbols[self.index(group, i)]


Values = Dict[str, Union[np.ndarray, IntervalArray, float]]


class PolynomialMap:
    def __init__(self, layout: VariableLayout, exponents, coefficients, max_degree: Optional[int] = None):
        exponents = np.array(exponents, dtype=np.int64).reshape(-1, layout.size)
        coefficients = np.array(coefficients, dtype=float)
        if coefficients.ndim == 1:
            coefficients = coefficients.reshape(-1, 1)
        if coefficients.shape[0] != exponents.shape[0]:
            raise ValueError(f"{exponents.shape[0]} exponent rows but {coefficients.shape[0]} coefficient rows")
        if np.any(exponents < 0):
            raise ValueError("exponents must be non-negative")
        self.layout = layout
        self.exponents, self.coefficients = _combine(exponents, coefficients)
        self.exponents.setflags(write=False)
        self.coefficients.setflags(write=False)
        self.max_degree = max_degree
        if max_degree is not None and self.degree > max_degree:
            raise ValueError(f"polynomial degree {self.degree} exceeds declared maximum {max_degree}")

    @property
    def output_dim(self) -> int:
        return self.coefficients.shape[1]

    @property
    def num_terms(self) -> int:
        return self.exponents.shape[0]

    @property
    def degree(self) -> int:
        if self.num_terms == 0:
            return 0
        return int(self.exponents.sum(axis=1).max())

    def __repr__(self):
        return f"PolynomialMap({self.layout}, terms={self.num_terms}, out={self.output_dim}, degree={self.degree})"

    # construction

    @classmethod
    def zero(cls, layout: VariableLayout, output_dim: int = 1) -> "PolynomialMap":
        return cls(layout, np.zeros((0, layout.size)), np.zeros((0, output_dim)))

    @classmethod
    def constant(cls, layout: VariableLayout, values) -> "PolynomialMap":
        values = np.atleast_1d(np.asarray(values, dtype=float))
        return cls(layout, np.zeros((1, layout.size)), values.reshape(1, -1))

    @classmethod
    def variable(cls, layout: VariableLayout, group: str, i: int = 0) -> "PolynomialMap":
        exp = np.zeros((1, layout.size), dtype=np.int64)
        exp[0, layout.index(group, i)] = 1
        return cls(layout, exp, [[1.0]])

    @classmethod
    def linear_map(cls, layout: VariableLayout, group: str, matrix, offset=None) -> "PolynomialMap":
        """matrix @ group (+ offset), one output per matrix row."""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        n = layout.arities[group]
        if matrix.shape[1] != n:
            raise ValueError(f"matrix has {matrix.shape[1]} columns, group {group} has {n} variables")
        exp = np.zeros((n, layout.size), dtype=np.int64)
        for j in range(n):
            exp[j, layout.index(group, j)] = 1
        poly = cls(layout, exp, matrix.T)
        if offset is not None:
            poly = poly + cls.constant(layout, offset)
        return poly

    @classmethod
    def quadratic_form(cls, layout: VariableLayout, group: str, Q) -> "PolynomialMap":
        """Scalar group' Q group."""
        Q = np.asarray(Q, dtype=float)
        n = layout.arities[group]
        if Q.shape != (n, n):
            raise ValueError(f"Q has shape {Q.shape}, expected ({n}, {n})")
        rows, coeffs = [], []
        for i in range(n):
            for j in range(i, n):
                c = Q[i, i] if i == j else Q[i, j] + Q[j, i]
                if c == 0.0:
                    continue
                exp = np.zeros(layout.size, dtype=np.int64)
                exp[layout.index(group, i)] += 1
                exp[layout.index(group, j)] += 1
                rows.append(exp)
                coeffs.append([c])
        if not rows:
            return cls.zero(layout)
        return cls(layout, rows, coeffs)

    @classmethod
    def stack(cls, polys: Sequence["PolynomialMap"]) -> "PolynomialMap":
        layout = polys[0].layout
        total = sum(p.output_dim for p in polys)
        exps, coeffs = [], []
        col = 0
        for p in polys:
            if p.layout != layout:
                raise ValueError("cannot stack polynomials over different layouts")
            c = np.zeros((p.num_terms, total))
            c[:, col:col + p.output_dim] = p.coefficients
            exps.append(p.exponents)
            coeffs.append(c)
            col += p.output_dim
        return cls(layout, np.concatenate(exps), np.concatenate(coeffs))

    # arithmetic

    def _check(self, other: "PolynomialMap"):
        if self.layout != other.layout:
            raise ValueError("polynomials are over different variable layouts")

    def __add__(self, other):
        if not isinstance(other, PolynomialMap):
            other = PolynomialMap.constant(self.layout, np.broadcast_to(other, (self.output_dim,)))
        self._check(other)
        if other.output_dim != self.output_dim:
            raise ValueError(f"output dimensions differ: {self.output_dim} vs {other.output_dim}")
        return PolynomialMap(self.layout,
                             np.concatenate([self.exponents, other.exponents]),
                             np.concatenate([self.coefficients, other.coefficients]))

    __radd__ = __add__

    def __neg__(self):
        return PolynomialMap(self.layout, self.exponents, -self.coefficients)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, PolynomialMap):
            return PolynomialMap(self.layout, self.exponents, self.coefficients * np.asarray(other, dtype=float))
        self._check(other)
        a, b = self.to_sympy(), other.to_sympy()
        if a.rows == b.rows:
            prod = a.multiply_elementwise(b)
        elif a.rows == 1:
            prod = b * a[0]
        elif b.rows == 1:
            prod = a * b[0]
        else:
            raise ValueError(f"cannot multiply outputs of size {self.output_dim} and {other.output_dim}")
        return PolynomialMap.from_sympy(self.layout, prod)

    __rmul__ = __mul__

    def __getitem__(self, index) -> "PolynomialMap":
        cols = np.atleast_1d(np.arange(self.output_dim)[index])
        return PolynomialMap(self.layout, self.exponents, self.coefficients[:, cols])

    def dot(self, other: "PolynomialMap") -> "PolynomialMap":
        """Scalar sum of the elementwise product."""
        prod = self * other
        return PolynomialMap(self.layout, prod.exponents, prod.coefficients.sum(axis=1, keepdims=True))

    def matmul(self, matrix) -> "PolynomialMap":
        """matrix @ self for a constant matrix."""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return PolynomialMap(self.layout, self.exponents, self.coefficients @ matrix.T)

    def derivative(self, group: str, i: int = 0) -> "PolynomialMap":
        return PolynomialMap.from_sympy(self.layout, self.to_sympy().diff(self.layout.symbol(group, i)))

    def gradient(self, group: str) -> "PolynomialMap":
        """Stacked partial derivatives of a scalar polynomial."""
        if self.output_dim != 1:
            raise ValueError("gradient needs a scalar polynomial")
        n = self.layout.arities[group]
        if n == 0:
            return PolynomialMap.zero(self.layout, 0)
        variables = [self.layout.symbol(group, i) for i in range(n)]
        return PolynomialMap.from_sympy(self.layout, self.to_sympy().jacobian(variables))

    def substitute(self, group: str, i: int, value: float) -> "PolynomialMap":
        """Fix one variable to a constant."""
        fixed = self.to_sympy().subs(self.layout.symbol(group, i), sp.Float(float(value)))
        return PolynomialMap.from_sympy(self.layout, fixed)

    def depends_on(self, group: str) -> bool:
        return bool(np.any(self.exponents[:, self.layout.slices[group]] > 0))

    def group_degree(self, group: str) -> np.ndarray:
        return self.exponents[:, self.layout.slices[group]].sum(axis=1)

    # symbolic form

    def to_sympy(self) -> sp.Matrix:
        """Column of sympy expressions in `layout.symbols`."""
        monomials = [sp.Mul(*[x ** int(k) for x, k in zip(self.layout.symbols, exp) if k])
                     for exp in self.exponents]
        return sp.Matrix(self.output_dim, 1,
                         [sp.Add(*[sp.Float(float(c)) * m for c, m in zip(self.coefficients[:, j], monomials)])
                          for j in range(self.output_dim)])

    @classmethod
    def from_sympy(cls, layout: VariableLayout, exprs, max_degree: Optional[int] = None) -> "PolynomialMap":
        """Polynomial map from sympy expressions, one output per expression."""
        exprs = [sp.expand(e) for e in (exprs if isinstance(exprs, (list, tuple)) else list(exprs))]
        known = set(layout.symbols)
        rows, coeffs = [], []
        for j, expr in enumerate(exprs):
            stray = expr.free_symbols - known
            if stray:
                raise ValueError(f"expression uses symbols outside {layout}: {sorted(map(str, stray))}")
            for monomial, c in sp.Poly(expr, *layout.symbols).terms():
                row = np.zeros(len(exprs))
                row[j] = float(c)
                rows.append(monomial)
                coeffs.append(row)
        if not rows:
            return cls.zero(layout, len(exprs))
        return cls(layout, rows, coeffs, max_degree)

    # evaluation

    def _columns(self, values: Values):
        used = np.flatnonzero(np.any(self.exponents > 0, axis=0))
        columns = {}
        batch = ()
        for g in GROUPS:
            s = self.layout.slices[g]
            needed = [v for v in used if s.start <= v < s.stop]
            if not needed:
                continue
            if g not in values:
                raise KeyError(f"polynomial depends on group {g!r} but no values were given")
            val = values[g]
            if isinstance(val, IntervalArray):
                lo, hi = val.lo, val.hi
            else:
                lo = hi = np.asarray(val, dtype=float)
            if g == "t":
                # time values carry no trailing vector axis
                lo = lo[..., None]
                hi = hi[..., None]
            batch = np.broadcast_shapes(batch, lo.shape[:-1])
            for v in needed:
                k = v - s.start
                columns[v] = (lo[..., k], hi[..., k])
        return columns, batch

    def evaluate(self, values: Values) -> Union[np.ndarray, IntervalArray]:
        """
        Evaluate on points or intervals; arrays broadcast over leading axes.

        Interval inputs (any group) produce an `IntervalArray` enclosure.
        """
        interval = any(isinstance(v, IntervalArray) for v in values.values())
        columns, batch = self._columns(values)
        if not interval:
            mono = np.ones(batch + (self.num_terms,))
            for v, (x, _) in columns.items():
                mono = mono * np.power(x[..., None], self.exponents[:, v])
            return mono @ self.coefficients
        mono = IntervalArray(np.ones(batch + (self.num_terms,)))
        for v, (lo, hi) in columns.items():
            mono = mono * power_table(IntervalArray(lo[..., None], hi[..., None]), self.exponents[:, v])
        out = mono[..., None] * self.coefficients
        return out.sum(axis=-2)

    __call__ = evaluate

    # structure

    def scaled_quadratic(self, group: str = "e", time_group: str = "t") -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """
        Recognize V = c(t) * e' Q e.

        Returns (c, Q) with `c` the coefficients of c(t) in increasing
        powers and Q symmetric, or None when V has another structure.
        """
        if self.output_dim != 1 or self.num_terms == 0:
            return None
        e_slice = self.layout.slices[group]
        t_slice = self.layout.slices[time_group]
        other = np.ones(self.layout.size, dtype=bool)
        other[e_slice] = False
        other[t_slice] = False
        if np.any(self.exponents[:, other] > 0) or np.any(self.group_degree(group) != 2):
            return None
        n = self.layout.arities[group]
        t_powers = self.exponents[:, t_slice].sum(axis=1)
        forms = {}
        for row, k in enumerate(t_powers):
            Q = forms.setdefault(int(k), np.zeros((n, n)))
            idx = np.flatnonzero(self.exponents[row, e_slice])
            c = self.coefficients[row, 0]
            if idx.size == 1:
                Q[idx[0], idx[0]] += c
            else:
                Q[idx[0], idx[1]] += 0.5 * c
                Q[idx[1], idx[0]] += 0.5 * c
        ref_power = min(forms, key=lambda k: k)
        ref = forms[ref_power]
        scale = np.abs(ref).max()
        if scale == 0.0:
            return None
        ref = ref / scale
        c = np.zeros(max(forms) + 1)
        for k, Q in forms.items():
            ratio = float(np.sum(Q * ref) / np.sum(ref * ref))
            if not np.allclose(Q, ratio * ref, rtol=1e-12, atol=1e-12 * scale):
                return None
            c[k] = ratio
        return c, ref

    # text form

    def to_lines(self) -> List[str]:
        lines = [f"terms {self.num_terms} outputs {self.output_dim}"]
        for exp, coeff in zip(self.exponents, self.coefficients):
            lines.append(" ".join(str(int(v)) for v in exp) + " : " + " ".join(repr(float(c)) for c in coeff))
        return lines

    @classmethod
    def from_lines(cls, layout: VariableLayout, lines: List[str]) -> "PolynomialMap":
        head = lines[0].split()
        if len(head) != 4 or head[0] != "terms" or head[2] != "outputs":
            raise ValueError(f"malformed polynomial header {lines[0]!r}")
        count, outputs = int(head[1]), int(head[3])
        exps = np.zeros((count, layout.size), dtype=np.int64)
        coeffs = np.zeros((count, outputs))
        for row, line in enumerate(lines[1:1 + count]):
            left, right = line.split(":")
            exps[row] = [int(v) for v in left.split()]
            coeffs[row] = [float(v) for v in right.split()]
        return cls(layout, exps, coeffs)


def power_table(x: IntervalArray, exponents: np.ndarray) -> IntervalArray:
    """x ** exponents elementwise with tight even powers; exponents broadcast on the last axis."""
    lo = np.ones(np.broadcast_shapes(x.shape, exponents.shape))
    hi = np.ones_like(lo)
    for k in np.unique(exponents):
        if k == 0:
            continue
        p = power(x, int(k))
        sel = exponents == k
        lo = np.where(sel, p.lo, lo)
        hi = np.where(sel, p.hi, hi)
    return IntervalArray(lo, hi)


def _combine(exponents: np.ndarray, coefficients: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Merge equal monomials, drop zero terms, sort rows."""
    if exponents.shape[0] == 0:
        return exponents.copy(), coefficients.copy()
    unique, inverse = np.unique(exponents, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    merged = np.zeros((unique.shape[0], coefficients.shape[1]))
    np.add.at(merged, inverse, coefficients)
    keep = np.any(merged != 0.0, axis=1)
    return unique[keep], merged[keep]
