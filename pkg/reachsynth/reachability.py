"""
Interval over-approximation of reachable sets by mixed-monotone embedding.

A decomposition function d(x, x_dual, u, w, w_dual) lifts the abstract
vector field to a monotone system on (x_lo, x_hi). Integrating that system
once bounds every trajectory that starts in the initial box under any
disturbance signal in W.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from reachsynth.errors import IntegrationError
from reachsynth.interval_core import Box
from reachsynth.intervals import IntervalArray

logger = logging.getLogger(__name__)

# (x, u, w) interval/point arguments -> (d f/d x, d f/d w) interval bounds
JacobianBounds = Callable[[IntervalArray, np.ndarray, IntervalArray], Tuple[IntervalArray, IntervalArray]]


class VectorField:
    """
    Batched vector field f(x, u, w).

    `func` receives arrays whose last axis is the state, input and
    disturbance vector and must broadcast over leading axes. When it is
    written against `reachsynth.intervals.namespace_for`, it also accepts
    interval arguments.
    """

    def __init__(self, dim_x: int, dim_u: int, dim_w: int, func: Callable,
                 jacobian: Optional[JacobianBounds] = None, name: str = "field"):
        self.dim_x = dim_x
        self.dim_u = dim_u
        self.dim_w = dim_w
        self.func = func
        self.jacobian = jacobian
        self.name = name

    def eval(self, x, u, w=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if w is None:
            w = np.zeros(self.dim_w)
        return np.asarray(self.func(x, u, np.asarray(w, dtype=float)), dtype=float)

    __call__ = eval

    def __repr__(self):
        return f"VectorField({self.name}, x={self.dim_x}, u={self.dim_u}, w={self.dim_w})"


@dataclass(frozen=True)
class ReachSettings:
    horizon: float
    steps: int = 50
    inflation: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.steps < 1:
            raise ValueError(f"steps must be at least 1, got {self.steps}")
        if any(v < 0 for v in self.inflation):
            raise ValueError("inflation must be non-negative")

    def inflation_vector(self, dim: int) -> np.ndarray:
        if not self.inflation:
            return np.zeros(dim)
        inflation = np.asarray(self.inflation, dtype=float)
        if inflation.size == 1:
            return np.full(dim, inflation[0])
        if inflation.size != dim:
            raise ValueError(f"inflation has length {inflation.size}, state has dimension {dim}")
        return inflation


class DecompositionFunction:
    """
    Jacobian-bound decomposition of a vector field.

    For row i, every state argument j != i is routed to `x` when the
    bound on df_i/dx_j is non-negative, to the dual when it is
    non-positive, and otherwise to `x` with the correction
    -a_ij (x_j - x_dual_j), a_ij being the lower Jacobian bound.
    Disturbances follow the same rule with (w, w_dual). The bounds are
    taken over the hull of both arguments, so the decomposition is local to
    the box currently being integrated.
    """

    def __init__(self, field: VectorField, jac_bounds: JacobianBounds):
        self.field = field
        self.jac_bounds = jac_bounds

    def _bounds(self, x, x_dual, u, w, w_dual):
        box = IntervalArray(np.minimum(x, x_dual), np.maximum(x, x_dual))
        wbox = IntervalArray(np.minimum(w, w_dual), np.maximum(w, w_dual))
        jx, jw = self.jac_bounds(box, u, wbox)
        for name, j in (("state", jx), ("disturbance", jw)):
            if np.any(np.isnan(j.lo)) or np.any(np.isnan(j.hi)):
                raise IntegrationError(f"{name} Jacobian bounds of {self.field.name} are NaN")
        return jx, jw

    def eval(self, x, x_dual, u, w_lo=None, w_hi=None) -> np.ndarray:
        n = self.field.dim_x
        x = np.asarray(x, dtype=float)
        x_dual = np.asarray(x_dual, dtype=float)
        u = np.asarray(u, dtype=float)
        batch = np.broadcast_shapes(x.shape[:-1], x_dual.shape[:-1], u.shape[:-1])
        x = np.broadcast_to(x, batch + (n,))
        x_dual = np.broadcast_to(x_dual, batch + (n,))
        u = np.broadcast_to(u, batch + (self.field.dim_u,))
        p = self.field.dim_w
        w = np.zeros(batch + (p,)) if w_lo is None else np.broadcast_to(np.asarray(w_lo, dtype=float), batch + (p,))
        w_dual = w if w_hi is None else np.broadcast_to(np.asarray(w_hi, dtype=float), batch + (p,))

        jx, jw = self._bounds(x, x_dual, u, w, w_dual)

        eye = np.eye(n, dtype=bool)
        use_dual = (jx.hi <= 0.0) & ~(jx.lo >= 0.0) & ~eye
        indefinite = (jx.lo < 0.0) & (jx.hi > 0.0) & ~eye
        # xi[..., i, :] is the argument of f_i
        xi = np.where(use_dual, x_dual[..., None, :], x[..., None, :])
        correction = np.where(indefinite, -jx.lo * (x - x_dual)[..., None, :], 0.0).sum(axis=-1)

        if p:
            w_use_dual = (jw.hi <= 0.0) & ~(jw.lo >= 0.0)
            w_indefinite = (jw.lo < 0.0) & (jw.hi > 0.0)
            omega = np.where(w_use_dual, w_dual[..., None, :], w[..., None, :])
            correction = correction + np.where(w_indefinite, -jw.lo * (w - w_dual)[..., None, :], 0.0).sum(axis=-1)
        else:
            omega = np.zeros(batch + (n, 0))

        values = self.field.eval(xi, u[..., None, :], omega)
        return np.diagonal(values, axis1=-2, axis2=-1) + correction

    __call__ = eval


def build_decomposition(f: VectorField, jac_bounds: Optional[JacobianBounds] = None) -> DecompositionFunction:
    jac_bounds = jac_bounds or f.jacobian
    if jac_bounds is None:
        raise ValueError(f"no Jacobian bounds available for {f.name}")
    return DecompositionFunction(f, jac_bounds)


def embed_integrate_batch(d: DecompositionFunction,
                          lo: np.ndarray,
                          hi: np.ndarray,
                          u: np.ndarray,
                          w_lo: np.ndarray,
                          w_hi: np.ndarray,
                          settings: ReachSettings,
                          labels: Optional[Sequence[Tuple[int, int]]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Integrate the embedding system for a batch of (box, input) pairs.

    `lo`, `hi` have shape (B, n) and `u` shape (B, m) or (m,). Returns the
    inflated bounds at t = horizon. `labels` names (cell, input) per row for
    error reports.
    """
    lo = np.array(lo, dtype=float, ndmin=2)
    hi = np.array(hi, dtype=float, ndmin=2)
    u = np.asarray(u, dtype=float)
    w_lo = np.asarray(w_lo, dtype=float)
    w_hi = np.asarray(w_hi, dtype=float)
    h = settings.horizon / settings.steps

    def rhs(a, b):
        return d.eval(a, b, u, w_lo, w_hi), d.eval(b, a, u, w_hi, w_lo)

    for step in range(settings.steps):
        k1l, k1h = rhs(lo, hi)
        k2l, k2h = rhs(lo + 0.5 * h * k1l, hi + 0.5 * h * k1h)
        k3l, k3h = rhs(lo + 0.5 * h * k2l, hi + 0.5 * h * k2h)
        k4l, k4h = rhs(lo + h * k3l, hi + h * k3h)
        lo = lo + h / 6.0 * (k1l + 2.0 * k2l + 2.0 * k3l + k4l)
        hi = hi + h / 6.0 * (k1h + 2.0 * k2h + 2.0 * k3h + k4h)
        bad = ~(np.all(np.isfinite(lo), axis=-1) & np.all(np.isfinite(hi), axis=-1))
        if np.any(bad):
            row = int(np.flatnonzero(bad)[0])
            cell, input_index = labels[row] if labels is not None else (None, None)
            raise IntegrationError(f"non-finite embedding state at step {step + 1}", cell=cell, input_index=input_index)

    inflation = settings.inflation_vector(lo.shape[-1])
    return np.minimum(lo, hi) - inflation, np.maximum(lo, hi) + inflation


def embed_integrate(d: DecompositionFunction, X0: Box, u, W: Optional[Box], s: ReachSettings) -> Box:
    p = d.field.dim_w
    w_lo = W.lo if W is not None and p else np.zeros(p)
    w_hi = W.hi if W is not None and p else np.zeros(p)
    lo, hi = embed_integrate_batch(d, X0.lo[None, :], X0.hi[None, :], np.asarray(u, dtype=float), w_lo, w_hi, s)
    return Box(lo[0], hi[0])


def trajectory_endpoints(f: VectorField, x0: np.ndarray, u: np.ndarray, w_values: np.ndarray,
                         horizon: float, steps: int = 200) -> np.ndarray:
    """
    RK4 endpoints of many point trajectories under piecewise-constant disturbances.

    `w_values` has shape (B, k, p): k equal-length disturbance pieces per run.
    """
    x = np.array(x0, dtype=float)
    w_values = np.asarray(w_values, dtype=float)
    pieces = w_values.shape[1]
    h = horizon / steps
    for step in range(steps):
        w = w_values[:, min(step * pieces // steps, pieces - 1), :]
        k1 = f.eval(x, u, w)
        k2 = f.eval(x + 0.5 * h * k1, u, w)
        k3 = f.eval(x + 0.5 * h * k2, u, w)
        k4 = f.eval(x + h * k3, u, w)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x
