"""
Tracking-error funnels between a concrete model and its continuous abstraction.

A certificate (V, kappa, gamma) bounds the error e inside the sublevel set
F(t) = {e | V(t, e) <= gamma} over each sampling period. The checks below
decide the three certificate conditions with three-valued verdicts:
sampling looks for a counterexample, interval bisection looks for a proof.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from reachsynth.errors import CertificationError, UnboundedLevelSetError, UncontrollableError
from reachsynth.interval_core import AffineMap, Box
from reachsynth.intervals import IntervalArray, matvec
from reachsynth.polynomial import GROUPS, PolynomialMap, VariableLayout

logger = logging.getLogger(__name__)

VERIFIED = "verified"
FALSIFIED = "falsified"
INCONCLUSIVE = "inconclusive"

DOMAIN_KEYS = ("xhat", "uhat", "duhat", "w", "what")


@dataclass
class Verdict:
    status: str
    witness: Optional[Dict[str, np.ndarray]] = None
    value: Optional[float] = None
    stats: Dict = field(default_factory=dict)

    @property
    def verified(self) -> bool:
        return self.status == VERIFIED

    @property
    def falsified(self) -> bool:
        return self.status == FALSIFIED

    def __str__(self):
        text = self.status
        if self.witness is not None:
            parts = ", ".join(f"{k}={np.array2string(np.asarray(v), precision=6)}" for k, v in self.witness.items())
            text += f" at {parts}"
        if self.value is not None:
            text += f" (value {self.value:.6g})"
        return text


def combine_verdicts(statuses: Sequence[str]) -> str:
    """falsified dominates, then inconclusive, then verified."""
    if FALSIFIED in statuses:
        return FALSIFIED
    if INCONCLUSIVE in statuses:
        return INCONCLUSIVE
    return VERIFIED


@dataclass
class CheckSettings:
    samples: int = 4096
    max_boxes: int = 100000
    min_width: float = 2.0 ** -10
    batch: int = 2048
    tolerance: float = 0.0
    seed: int = 0
    time_samples: int = 64


def error_layout(n_x: int, nhat_x: int, nhat_u: int, n_w: int, nhat_w: int) -> VariableLayout:
    return VariableLayout(t=1, e=n_x, xhat=nhat_x, uhat=nhat_u, w=n_w, what=nhat_w)


class ErrorSystem:
    """
    Error dynamics de/dt = f_e(e, xhat, uhat, w, what) + g_e(e, xhat, uhat, w) u.

    `f_e` and `g_e` must accept interval arguments (see
    `reachsynth.intervals.namespace_for`). `g_e` may return a constant
    (n_x, n_u) matrix. `state_transform(xhat)` is the optional rotation phi
    with e = phi(xhat) (x - pi(xhat, uhat)). The jump of e at a sampling
    instant is -jump_matrix @ duhat, which defaults to the input columns of
    pi and must be given explicitly together with a state transform.
    """

    def __init__(self,
                 n_x: int,
                 n_u: int,
                 nhat_x: int,
                 nhat_u: int,
                 n_w: int,
                 nhat_w: int,
                 f_e: Callable,
                 g_e: Callable,
                 pi: Optional[AffineMap] = None,
                 state_transform: Optional[Callable] = None,
                 feedforward: Optional[PolynomialMap] = None,
                 jump_matrix=None,
                 state_hull: Optional[Callable] = None,
                 name: str = "error system"):
        self.n_x, self.n_u = n_x, n_u
        self.nhat_x, self.nhat_u = nhat_x, nhat_u
        self.n_w, self.nhat_w = n_w, nhat_w
        self.layout = error_layout(n_x, nhat_x, nhat_u, n_w, nhat_w)
        self.f_e = f_e
        self.g_e = g_e
        self.pi = pi
        self.state_transform = state_transform
        self.name = name
        if feedforward is not None and (feedforward.layout != self.layout or feedforward.output_dim != n_u):
            raise ValueError("feedforward must be a polynomial over the error layout with one output per input")
        self.feedforward = feedforward
        if jump_matrix is None:
            if state_transform is not None:
                raise ValueError("a state transform needs an explicit jump matrix")
            jump_matrix = pi.input_part if pi is not None else np.zeros((n_x, nhat_u))
        self.jump_matrix = np.asarray(jump_matrix, dtype=float).reshape(n_x, nhat_u)
        self._state_hull = state_hull

    def __repr__(self):
        return f"ErrorSystem({self.name}, e={self.n_x}, u={self.n_u})"

    def error_state(self, x, xhat, uhat) -> np.ndarray:
        diff = np.asarray(x, dtype=float) - self.pi.apply(xhat, uhat)
        if self.state_transform is None:
            return diff
        phi = self.state_transform(np.asarray(xhat, dtype=float))
        return np.einsum("...ij,...j->...i", phi, diff)

    def concrete_state(self, e, xhat, uhat) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        if self.state_transform is not None:
            phi = self.state_transform(np.asarray(xhat, dtype=float))
            e = np.linalg.solve(phi, e[..., None])[..., 0]
        return self.pi.apply(xhat, uhat) + e

    def jump_shift(self, duhat) -> np.ndarray:
        return np.asarray(duhat, dtype=float) @ self.jump_matrix.T

    def state_hull(self, eps) -> np.ndarray:
        """Per-dimension bound on x - pi(xhat, uhat) when |e| <= eps."""
        eps = np.asarray(eps, dtype=float)
        if self._state_hull is None:
            return eps
        return np.asarray(self._state_hull(eps), dtype=float)

    def drift(self, e, xhat, uhat, w, what):
        return self.f_e(e, xhat, uhat, w, what)

    def closed_loop(self, kappa: PolynomialMap, values: Dict):
        """f_e + g_e kappa on points or intervals."""
        u = kappa.evaluate(values)
        f = self.f_e(values["e"], values.get("xhat"), values.get("uhat"), values.get("w"), values.get("what"))
        g = self.g_e(values["e"], values.get("xhat"), values.get("uhat"), values.get("w"))
        return f + apply_input(g, u)


def apply_input(g, u):
    """g @ u for a constant or batched, point or interval input matrix."""
    if isinstance(g, IntervalArray) or (isinstance(u, IntervalArray) and np.ndim(g) > 2):
        g = g if isinstance(g, IntervalArray) else IntervalArray(g)
        u = u if isinstance(u, IntervalArray) else IntervalArray(u)
        return (g * u[..., None, :]).sum(axis=-1)
    g = np.asarray(g, dtype=float)
    if g.ndim == 2:
        return matvec(g, u)
    return np.einsum("...ij,...j->...i", g, u)


def error_state(x, xhat, uhat, es: ErrorSystem) -> np.ndarray:
    return es.error_state(x, xhat, uhat)


class FunnelCertificate:
    def __init__(self,
                 V: PolynomialMap,
                 kappa: PolynomialMap,
                 gamma: float,
                 T_s: float,
                 E0: Box,
                 domains: Dict[str, Optional[Box]],
                 verdicts: Optional[Dict[str, str]] = None,
                 meta: Optional[Dict] = None):
        if V.output_dim != 1:
            raise ValueError("V must be scalar valued")
        if V.layout != kappa.layout:
            raise ValueError("V and kappa must share a variable layout")
        if not gamma > 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        if not T_s > 0:
            raise ValueError(f"T_s must be positive, got {T_s}")
        for group in ("xhat", "uhat", "w", "what"):
            if V.depends_on(group):
                raise ValueError(f"V may only depend on t and e, not {group}")
        unknown = set(domains) - set(DOMAIN_KEYS)
        if unknown:
            raise ValueError(f"unknown certificate domains {sorted(unknown)}")
        self.V = V
        self.kappa = kappa
        self.gamma = float(gamma)
        self.T_s = float(T_s)
        self.E0 = E0
        self.domains = {k: domains.get(k) for k in DOMAIN_KEYS}
        self.verdicts = dict(verdicts or {})
        self.meta = dict(meta or {})
        self.last_verdicts: Dict[str, Verdict] = {}
        self._gradient = V.gradient("e")
        self._dVdt = V.derivative("t")

    @property
    def layout(self) -> VariableLayout:
        return self.V.layout

    @property
    def n_x(self) -> int:
        return self.layout.arities["e"]

    def value(self, t, e):
        return self.V.evaluate({"t": t, "e": e})[..., 0]

    def control(self, t, e, xhat, uhat) -> np.ndarray:
        return self.kappa.evaluate({"t": t, "e": e, "xhat": xhat, "uhat": uhat})

    def vdot(self, es: ErrorSystem, values: Dict):
        grad = self._gradient.evaluate(values)
        edot = es.closed_loop(self.kappa, values)
        return (grad * edot).sum(axis=-1) + self._dVdt.evaluate(values)[..., 0]

    def with_gamma(self, gamma: float) -> "FunnelCertificate":
        return FunnelCertificate(self.V, self.kappa, gamma, self.T_s, self.E0, self.domains, {}, self.meta)

    def with_E0(self, E0: Box) -> "FunnelCertificate":
        return FunnelCertificate(self.V, self.kappa, self.gamma, self.T_s, E0, self.domains, self.verdicts, self.meta)


def _domain_bounds(cert: FunnelCertificate, key: str, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    box = cert.domains.get(key)
    if dim == 0:
        return np.zeros(0), np.zeros(0)
    if box is None:
        raise ValueError(f"certificate has no {key} domain")
    return box.lo, box.hi


def _sample_box(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int, bias: float = 0.3) -> np.ndarray:
    """Uniform samples, each coordinate pushed to a face with probability `bias`."""
    x = lo + (hi - lo) * rng.random((n, lo.size))
    face = rng.random((n, lo.size)) < bias
    side = rng.random((n, lo.size)) < 0.5
    return np.where(face, np.where(side, lo, hi), x)


def _random_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    d = rng.standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _project_to_level(cert: FunnelCertificate, t: np.ndarray, directions: np.ndarray, level: float):
    """Radii r with V(t, r d) = level, by bracketing and bisection; NaN where no crossing was found."""
    n = len(t)
    g0 = cert.value(t, np.zeros_like(directions)) - level
    lo = np.zeros(n)
    hi = np.ones(n)
    for _ in range(60):
        above = cert.value(t, hi[:, None] * directions) - level >= 0
        if np.all(above):
            break
        lo = np.where(above, lo, hi)
        hi = np.where(above, hi, 2.0 * hi)
    bracketed = (cert.value(t, hi[:, None] * directions) - level >= 0) & (g0 < 0)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        above = cert.value(t, mid[:, None] * directions) - level >= 0
        lo = np.where(above, lo, mid)
        hi = np.where(above, mid, hi)
    return np.where(bracketed, hi, np.nan)


def _relevant_dims(lo: np.ndarray, hi: np.ndarray, bounds: Callable) -> np.ndarray:
    """Dimensions whose collapse to the midpoint tightens any root bound."""
    ref = np.concatenate([np.ravel(b) for b in bounds(lo[None], hi[None])])
    relevant = np.zeros(lo.size, dtype=bool)
    for d in range(lo.size):
        if hi[d] <= lo[d]:
            continue
        l, h = lo.copy(), hi.copy()
        l[d] = h[d] = 0.5 * (lo[d] + hi[d])
        probe = np.concatenate([np.ravel(b) for b in bounds(l[None], h[None])])
        with np.errstate(invalid="ignore"):
            changed = np.abs(probe - ref) > 1e-12 * np.maximum(1.0, np.abs(ref))
        relevant[d] = bool(np.any(changed | (np.isfinite(probe) != np.isfinite(ref))))
    if not np.any(relevant):
        relevant = hi > lo
    return relevant


def _bisect(lo: np.ndarray, hi: np.ndarray, classify: Callable, bounds: Callable,
            settings: CheckSettings) -> Tuple[str, Dict, Optional[np.ndarray]]:
    """
    Branch and bound over a root box.

    `classify(lo, hi)` returns (done, bad) masks per box: done boxes are
    proven fine or irrelevant, bad boxes are proven violations. Returns
    (status, stats, center of a bad box).
    """
    relevant = _relevant_dims(lo, hi, bounds)
    root_width = np.where(hi > lo, hi - lo, 1.0)
    stack = [(lo[None].copy(), hi[None].copy())]
    processed = 0
    depth_hit = False
    while stack:
        blo, bhi = stack.pop()
        if len(blo) > settings.batch:
            stack.append((blo[settings.batch:], bhi[settings.batch:]))
            blo, bhi = blo[:settings.batch], bhi[:settings.batch]
        processed += len(blo)
        done, bad = classify(blo, bhi)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            return FALSIFIED, {"boxes": processed, "relevant": relevant.tolist()}, 0.5 * (blo[i] + bhi[i])
        open_ = ~done
        if not np.any(open_):
            continue
        blo, bhi = blo[open_], bhi[open_]
        rel = np.where(relevant, (bhi - blo) / root_width, -1.0)
        split = np.argmax(rel, axis=1)
        if np.any(rel[np.arange(len(blo)), split] <= settings.min_width):
            depth_hit = True
            break
        if processed >= settings.max_boxes:
            break
        rows = np.arange(len(blo))
        mid = 0.5 * (blo[rows, split] + bhi[rows, split])
        left_hi = bhi.copy()
        left_hi[rows, split] = mid
        right_lo = blo.copy()
        right_lo[rows, split] = mid
        stack.append((np.concatenate([blo, right_lo]), np.concatenate([left_hi, bhi])))
    stats = {"boxes": processed, "relevant": relevant.tolist()}
    if stack or depth_hit:
        stats["reason"] = "minimum width reached" if depth_hit else "box budget exhausted"
        return INCONCLUSIVE, stats, None
    return VERIFIED, stats, None


# interval helpers over a flat (t, e, xhat, uhat, w, what) box


def _split_groups(layout: VariableLayout, lo: np.ndarray, hi: np.ndarray) -> Dict[str, IntervalArray]:
    values = {}
    for g in GROUPS:
        s = layout.slices[g]
        l, h = lo[..., s], hi[..., s]
        if g == "t":
            l, h = l[..., 0], h[..., 0]
        values[g] = IntervalArray(l, h)
    return values


def _check_scaled_quadratic(cert: FunnelCertificate):
    """(c, Q) when V = c(t) e'Qe with Q positive definite, else None."""
    form = cert.V.scaled_quadratic()
    if form is None:
        return None
    c, Q = form
    eig = np.linalg.eigvalsh(Q)
    if eig.min() <= 0.0:
        if c[0] < 0:
            c, Q = -c, -Q
            eig = np.linalg.eigvalsh(Q)
        if eig.min() <= 0.0:
            return None
    return c, Q


def _poly_min(c: np.ndarray, T: float) -> float:
    poly = np.polynomial.Polynomial(c)
    candidates = [0.0, T]
    if len(c) > 2:
        roots = poly.deriv().roots()
        candidates += [float(r.real) for r in roots if abs(r.imag) < 1e-12 and 0.0 <= r.real <= T]
    return float(min(poly(t) for t in candidates))


def check_initial_containment(cert: FunnelCertificate, settings: Optional[CheckSettings] = None) -> Verdict:
    settings = settings or CheckSettings()
    E0 = cert.E0
    form = _check_scaled_quadratic(cert)
    if form is not None:
        c, Q = form
        # convex in e: the maximum over E0 sits at a vertex
        corners = np.array(_corners(E0.hi, E0.lo))
        values = c[0] * np.einsum("ki,ij,kj->k", corners, Q, corners)
        worst = int(np.argmax(values))
        stats = {"method": "vertices", "max": float(values[worst])}
        if values[worst] <= cert.gamma:
            return Verdict(VERIFIED, value=float(values[worst]), stats=stats)
        return Verdict(FALSIFIED, {"e": corners[worst]}, float(values[worst]), stats)

    rng = np.random.default_rng(settings.seed)
    samples = np.concatenate([np.array(_corners(E0.hi, E0.lo)) if E0.dim <= 12 else np.zeros((0, E0.dim)),
                              _sample_box(rng, E0.lo, E0.hi, settings.samples)])
    values = cert.value(np.zeros(len(samples)), samples)
    worst = int(np.argmax(values))
    if values[worst] > cert.gamma:
        return Verdict(FALSIFIED, {"e": samples[worst]}, float(values[worst]), {"method": "sampling"})

    def bounds(lo, hi):
        v = cert.V.evaluate({"t": IntervalArray(np.zeros(len(lo))), "e": IntervalArray(lo, hi)})
        return v.lo[..., 0], v.hi[..., 0]

    def classify(lo, hi):
        vlo, vhi = bounds(lo, hi)
        return vhi <= cert.gamma, vlo > cert.gamma

    status, stats, center = _bisect(E0.lo.copy(), E0.hi.copy(), classify, bounds, settings)
    stats["method"] = "bisection"
    if status == FALSIFIED:
        value = float(cert.value(np.zeros(1), center[None])[0])
        return Verdict(FALSIFIED, {"e": center}, value, stats)
    return Verdict(status, stats=stats)


def _corners(first, second) -> List[np.ndarray]:
    return [np.array(c, dtype=float) for c in itertools.product(*zip(first, second))]


def check_decrease(cert: FunnelCertificate, es: ErrorSystem, tolerance: Optional[float] = None,
                   settings: Optional[CheckSettings] = None, falsify_only: bool = False) -> Verdict:
    """
    dV/dt <= -tolerance on {t in [0, T_s], V(t, e) = gamma} for every
    abstract state, input and disturbance in the certificate domains.
    """
    settings = settings or CheckSettings()
    tol = settings.tolerance if tolerance is None else tolerance
    layout = cert.layout
    n = cert.n_x
    rng = np.random.default_rng(settings.seed)
    N = settings.samples

    t = cert.T_s * rng.random(N)
    t[: N // 8] = 0.0
    t[N // 8: N // 4] = cert.T_s
    dirs = _random_directions(rng, N, n)
    radii = _project_to_level(cert, t, dirs, cert.gamma)
    ok = np.isfinite(radii)
    e = radii[:, None] * dirs
    values = {"t": t[ok], "e": e[ok]}
    for group in ("xhat", "uhat", "w", "what"):
        lo, hi = _domain_bounds(cert, group, layout.arities[group])
        values[group] = _sample_box(rng, lo, hi, int(ok.sum()))
    stats = {"samples": int(ok.sum())}
    if ok.any():
        vdot = cert.vdot(es, values)
        worst = int(np.argmax(vdot))
        stats["max_vdot"] = float(vdot[worst])
        if vdot[worst] > -tol:
            witness = {k: np.asarray(v)[worst] for k, v in values.items()}
            return Verdict(FALSIFIED, witness, float(vdot[worst]), stats)
    if falsify_only:
        return Verdict(INCONCLUSIVE, stats=dict(stats, reason="interval certification skipped"))

    try:
        eps = compute_epsilon(cert, settings)
    except UnboundedLevelSetError as exc:
        return Verdict(INCONCLUSIVE, stats=dict(stats, reason=str(exc)))
    eps = eps * (1.0 + 1e-9) + 1e-12
    lo = np.zeros(layout.size)
    hi = np.zeros(layout.size)
    lo[layout.slices["t"]], hi[layout.slices["t"]] = 0.0, cert.T_s
    lo[layout.slices["e"]], hi[layout.slices["e"]] = -eps, eps
    for key in ("xhat", "uhat", "w", "what"):
        dlo, dhi = _domain_bounds(cert, key, layout.arities[key])
        lo[layout.slices[key]], hi[layout.slices[key]] = dlo, dhi

    def bounds(blo, bhi):
        vals = _split_groups(layout, blo, bhi)
        v = cert.V.evaluate(vals)
        vd = cert.vdot(es, vals)
        return v.lo[..., 0], v.hi[..., 0], vd.hi

    def classify(blo, bhi):
        vlo, vhi, vdhi = bounds(blo, bhi)
        off_level = (vhi < cert.gamma) | (vlo > cert.gamma)
        return off_level | (vdhi <= -tol), np.zeros(len(blo), dtype=bool)

    status, bstats, _ = _bisect(lo, hi, classify, bounds, settings)
    stats.update(bstats)
    stats["method"] = "bisection"
    return Verdict(status, stats=stats)


def check_jump(cert: FunnelCertificate, es: ErrorSystem, settings: Optional[CheckSettings] = None) -> Verdict:
    """V(0, e - J du) <= gamma whenever V(T_s, e) <= gamma and du in the jump domain."""
    settings = settings or CheckSettings()
    T = cert.T_s
    m = es.nhat_u
    if m:
        du_lo, du_hi = _domain_bounds(cert, "duhat", m)
    else:
        du_lo = du_hi = np.zeros(0)
    du_corners = np.array(_corners(du_lo, du_hi)) if m else np.zeros((1, 0))
    shifts = es.jump_shift(du_corners)

    form = _check_scaled_quadratic(cert)
    if form is not None and np.all(np.isfinite(shifts)):
        c, Q = form
        poly = np.polynomial.Polynomial(c)
        c0, cT = float(poly(0.0)), float(poly(T))
        if c0 > 0 and cT > 0:
            norms = np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", shifts, Q, shifts), 0.0))
            worst = int(np.argmax(norms))
            r_T = np.sqrt(cert.gamma / cT)
            r_0 = np.sqrt(cert.gamma / c0)
            stats = {"method": "ellipsoid", "radius_end": float(r_T), "radius_start": float(r_0),
                     "max_shift": float(norms[worst])}
            if r_T + norms[worst] <= r_0:
                return Verdict(VERIFIED, value=float((r_T + norms[worst]) ** 2 * c0), stats=stats)
            s = shifts[worst]
            if norms[worst] > 0:
                e = -r_T * s / norms[worst]
            else:
                basis = np.zeros(cert.n_x)
                basis[0] = 1.0
                e = r_T * basis / np.sqrt(Q[0, 0])
            value = float(cert.value(np.zeros(1), (e - s)[None])[0])
            return Verdict(FALSIFIED, {"e": e, "duhat": du_corners[worst]}, value, stats)

    if not np.any(shifts):
        V0 = cert.V.substitute("t", 0, 0.0)
        VT = cert.V.substitute("t", 0, T)
        if V0.exponents.shape == VT.exponents.shape and np.array_equal(V0.exponents, VT.exponents) \
                and np.allclose(V0.coefficients, VT.coefficients, rtol=0, atol=0):
            return Verdict(VERIFIED, stats={"method": "no jump effect"})

    rng = np.random.default_rng(settings.seed)
    N = settings.samples
    dirs = _random_directions(rng, N, cert.n_x)
    radii = _project_to_level(cert, np.full(N, T), dirs, cert.gamma)
    ok = np.isfinite(radii)
    scale = np.where(rng.random(N) < 0.5, 1.0, rng.random(N) ** (1.0 / max(cert.n_x, 1)))
    e = (radii * scale)[ok, None] * dirs[ok]
    if m:
        du = np.concatenate([du_corners, _sample_box(rng, du_lo, du_hi, max(len(e) - len(du_corners), 0))])[:len(e)]
    else:
        du = np.zeros((len(e), 0))
    after = e - es.jump_shift(du)
    values = cert.value(np.zeros(len(e)), after)
    stats = {"samples": int(len(e))}
    if len(values):
        worst = int(np.argmax(values))
        stats["max_value"] = float(values[worst])
        if values[worst] > cert.gamma:
            return Verdict(FALSIFIED, {"e": e[worst], "duhat": du[worst]}, float(values[worst]), stats)

    try:
        eps = compute_epsilon(cert, settings) * (1.0 + 1e-9) + 1e-12
    except UnboundedLevelSetError as exc:
        return Verdict(INCONCLUSIVE, stats=dict(stats, reason=str(exc)))
    n = cert.n_x
    lo = np.concatenate([-eps, du_lo])
    hi = np.concatenate([eps, du_hi])

    def bounds(blo, bhi):
        e_box = IntervalArray(blo[:, :n], bhi[:, :n])
        du_box = IntervalArray(blo[:, n:], bhi[:, n:])
        vT = cert.V.evaluate({"t": IntervalArray(np.full(len(blo), T)), "e": e_box})
        shifted = e_box - matvec(es.jump_matrix, du_box)
        v0 = cert.V.evaluate({"t": IntervalArray(np.zeros(len(blo))), "e": shifted})
        return vT.lo[:, 0], vT.hi[:, 0], v0.lo[:, 0], v0.hi[:, 0]

    def classify(blo, bhi):
        vT_lo, vT_hi, v0_lo, v0_hi = bounds(blo, bhi)
        done = (vT_lo > cert.gamma) | (v0_hi <= cert.gamma)
        bad = (vT_hi <= cert.gamma) & (v0_lo > cert.gamma)
        return done, bad

    status, bstats, center = _bisect(lo, hi, classify, bounds, settings)
    stats.update(bstats)
    stats["method"] = "bisection"
    if status == FALSIFIED:
        e_w, du_w = center[:n], center[n:]
        value = float(cert.value(np.zeros(1), (e_w - es.jump_shift(du_w))[None])[0])
        return Verdict(FALSIFIED, {"e": e_w, "duhat": du_w}, value, stats)
    return Verdict(status, stats=stats)


def compute_epsilon(cert: FunnelCertificate, settings: Optional[CheckSettings] = None) -> np.ndarray:
    """Per-dimension bound on |e_i| over the union of F(t), t in [0, T_s]."""
    settings = settings or CheckSettings()
    form = cert.V.scaled_quadratic()
    if form is not None:
        c, Q = form
        eig = np.linalg.eigvalsh(Q)
        c_min = _poly_min(c, cert.T_s)
        if c_min < 0:
            c, Q, eig = -c, -Q, -eig[::-1]
            c_min = _poly_min(c, cert.T_s)
        if eig.min() <= 0.0 or c_min <= 0.0:
            raise UnboundedLevelSetError(f"sublevel set of V at gamma={cert.gamma:.6g} is unbounded")
        return np.sqrt(cert.gamma * np.diag(np.linalg.inv(Q)) / c_min)

    n = cert.n_x
    if cert.V.depends_on("t"):
        times = np.linspace(0.0, cert.T_s, max(settings.time_samples, 64))
        spacing = times[1] - times[0]
    else:
        times = np.zeros(1)
        spacing = 0.0
    eps = np.zeros(n)
    for t in times:
        eps = np.maximum(eps, _level_set_hull(cert, t, spacing, settings))
    return eps


def _level_set_hull(cert: FunnelCertificate, t: float, spacing: float, settings: CheckSettings) -> np.ndarray:
    """Box bound on {e | V(s, e) <= gamma} for |s - t| <= spacing / 2."""
    n = cert.n_x
    dVdt = cert.V.derivative("t")
    radius = 1.0
    for _ in range(40):
        margin = 0.0
        if spacing > 0:
            rate = dVdt.evaluate({"t": IntervalArray(0.0, cert.T_s), "e": IntervalArray(-np.full(n, radius), np.full(n, radius))})
            margin = float(rate.mag()[0]) * spacing / 2.0
        level = cert.gamma + margin
        kept_lo, kept_hi = _cover_sublevel(cert, t, level, radius, settings)
        touches = np.any(np.isclose(np.abs(kept_lo), radius) | np.isclose(np.abs(kept_hi), radius)) if len(kept_lo) else False
        if not touches:
            if len(kept_lo) == 0:
                return np.zeros(n)
            return np.maximum(np.abs(kept_lo), np.abs(kept_hi)).max(axis=0)
        radius *= 2.0
    raise UnboundedLevelSetError(f"sublevel set of V at gamma={cert.gamma:.6g} exceeds radius {radius:.3g}")


def _cover_sublevel(cert: FunnelCertificate, t: float, level: float, radius: float, settings: CheckSettings):
    n = cert.n_x
    lo = -np.full((1, n), radius)
    hi = np.full((1, n), radius)
    final_lo, final_hi = [], []
    processed = 0
    min_width = 2.0 * radius * 2.0 ** -7
    while len(lo):
        processed += len(lo)
        v = cert.V.evaluate({"t": IntervalArray(np.full(len(lo), t)), "e": IntervalArray(lo, hi)})
        keep = v.lo[:, 0] <= level
        lo, hi = lo[keep], hi[keep]
        inside = v.hi[keep, 0] <= level
        widths = hi - lo
        small = widths.max(axis=1) <= min_width
        settled = inside | small
        if processed >= settings.max_boxes:
            settled[:] = True
        final_lo.append(lo[settled])
        final_hi.append(hi[settled])
        lo, hi = lo[~settled], hi[~settled]
        if len(lo) == 0:
            break
        split = np.argmax(hi - lo, axis=1)
        rows = np.arange(len(lo))
        mid = 0.5 * (lo[rows, split] + hi[rows, split])
        left_hi = hi.copy()
        left_hi[rows, split] = mid
        right_lo = lo.copy()
        right_lo[rows, split] = mid
        lo = np.concatenate([lo, right_lo])
        hi = np.concatenate([left_hi, hi])
    return np.concatenate(final_lo), np.concatenate(final_hi)


# candidate generation


def linearize(es: ErrorSystem, xhat0, uhat0, step: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of the drift plus feedforward at e = 0."""
    xhat0 = np.asarray(xhat0, dtype=float)
    uhat0 = np.asarray(uhat0, dtype=float)
    w0 = np.zeros(es.n_w)
    what0 = np.zeros(es.nhat_w)
    ff = es.feedforward

    def field(e):
        values = {"t": np.zeros(len(e)), "e": e, "xhat": np.broadcast_to(xhat0, (len(e), es.nhat_x)),
                  "uhat": np.broadcast_to(uhat0, (len(e), es.nhat_u)),
                  "w": np.zeros((len(e), es.n_w)), "what": np.zeros((len(e), es.nhat_w))}
        f = np.asarray(es.f_e(e, values["xhat"], values["uhat"], values["w"], values["what"]), dtype=float)
        if ff is not None:
            g = es.g_e(e, values["xhat"], values["uhat"], values["w"])
            f = f + apply_input(g, ff.evaluate(values))
        return f

    n = es.n_x
    probes = np.concatenate([step * np.eye(n), -step * np.eye(n)])
    values = field(probes)
    A = ((values[:n] - values[n:]) / (2.0 * step)).T
    g0 = es.g_e(np.zeros(n), xhat0, uhat0, w0)
    B = np.asarray(g0, dtype=float).reshape(n, es.n_u)
    return A, B


def _check_stabilizable(A: np.ndarray, B: np.ndarray):
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -1e-9:
            rank = np.linalg.matrix_rank(np.hstack([A - lam * np.eye(n), B.astype(complex)]), tol=1e-9)
            if rank < n:
                raise UncontrollableError(f"linearization is not stabilizable: mode {lam:.4g} is uncontrollable")


def stabilizing_gain(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
                     max_iter: int = 100, tol: float = 1e-10) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    LQR gain K (u = K e) by Kleinman iteration from a Bass-shift start.

    Returns (K, P, iterations) with P the closed-loop Lyapunov solution.
    """
    _check_stabilizable(A, B)
    n = A.shape[0]
    beta = np.abs(A).sum(axis=1).max() + 1.0
    L = A + beta * np.eye(n)
    Z = scipy.linalg.solve_continuous_lyapunov(L, 2.0 * B @ B.T)
    Z = 0.5 * (Z + Z.T)
    try:
        np.linalg.cholesky(Z)
        K = -B.T @ np.linalg.inv(Z)
    except np.linalg.LinAlgError:
        logger.debug("Bass shift start singular, seeding Kleinman iteration from the Riccati solution")
        P = scipy.linalg.solve_continuous_are(A, B, Q, R)
        K = -np.linalg.solve(R, B.T @ P)
    R_inv = np.linalg.inv(R)
    P = None
    for iteration in range(1, max_iter + 1):
        A_k = A + B @ K
        if np.linalg.eigvals(A_k).real.max() >= 0:
            raise UncontrollableError("Kleinman iteration lost closed-loop stability")
        P = scipy.linalg.solve_continuous_lyapunov(A_k.T, -(Q + K.T @ R @ K))
        P = 0.5 * (P + P.T)
        K_next = -R_inv @ B.T @ P
        if np.linalg.norm(K_next - K) <= tol * (1.0 + np.linalg.norm(K)):
            K = K_next
            break
        K = K_next
    A_cl = A + B @ K
    P = scipy.linalg.solve_continuous_lyapunov(A_cl.T, -(Q + K.T @ R @ K))
    return K, 0.5 * (P + P.T), iteration


def decay_rate(P: np.ndarray, Q: np.ndarray, R: np.ndarray, K: np.ndarray) -> float:
    """Largest c with d/dt e'Pe <= -c e'Pe for the linear closed loop."""
    return float(scipy.linalg.eigh(Q + K.T @ R @ K, P, eigvals_only=True).min())


def _acceptable(cert: FunnelCertificate, es: ErrorSystem, settings: CheckSettings, accept_inconclusive: bool) -> bool:
    jump = check_jump(cert, es, settings)
    if jump.falsified or (jump.status == INCONCLUSIVE and not accept_inconclusive):
        return False
    decrease = check_decrease(cert, es, settings=settings, falsify_only=accept_inconclusive)
    if decrease.falsified:
        return False
    return decrease.verified or accept_inconclusive


def lyap_candidate(es: ErrorSystem,
                   operating_point: Tuple[Sequence[float], Sequence[float]],
                   q_weight: Sequence[float],
                   r_weight: Sequence[float],
                   T_s: float,
                   domains: Dict[str, Optional[Box]],
                   alpha=0.0,
                   gamma_range: Tuple[float, float] = (1e-4, 1e4),
                   scan_points: int = 25,
                   bisection_steps: int = 40,
                   prefer: str = "largest",
                   accept_inconclusive: bool = False,
                   E0: Optional[Box] = None,
                   settings: Optional[CheckSettings] = None) -> FunnelCertificate:
    """
    Linear-quadratic certificate candidate around an operating point.

    kappa = feedforward + K e with K from the linearized error dynamics,
    V = (1 + alpha t) e' P e with P the closed-loop Lyapunov solution, and
    gamma searched over `gamma_range` for a level passing the decrease and
    jump checks.
    """
    if prefer not in ("largest", "smallest"):
        raise ValueError(f"prefer must be 'largest' or 'smallest', got {prefer!r}")
    settings = settings or CheckSettings()
    xhat0, uhat0 = operating_point
    A, B = linearize(es, xhat0, uhat0)
    Qw = np.diag(np.asarray(q_weight, dtype=float))
    Rw = np.diag(np.asarray(r_weight, dtype=float))
    K, P, iterations = stabilizing_gain(A, B, Qw, Rw)
    rate = decay_rate(P, Qw, Rw, K)
    if alpha == "auto":
        alpha = 0.5 * rate
    alpha = float(alpha)
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    logger.info(f"LQR gain after {iterations} Kleinman iterations, decay rate {rate:.4g}, alpha {alpha:.4g}")

    layout = es.layout
    kappa = PolynomialMap.linear_map(layout, "e", K)
    if es.feedforward is not None:
        kappa = kappa + es.feedforward
    V = PolynomialMap.quadratic_form(layout, "e", P)
    if alpha > 0:
        V = V * (PolynomialMap.constant(layout, [1.0]) + PolynomialMap.variable(layout, "t") * alpha)

    meta = {
        "alpha": alpha,
        "decay_rate": rate,
        "q_weight": [float(v) for v in q_weight],
        "r_weight": [float(v) for v in r_weight],
        "operating_point": {"xhat": [float(v) for v in xhat0], "uhat": [float(v) for v in uhat0]},
        "gain": K.tolist(),
        "closed_loop_eigenvalues": sorted(float(v) for v in np.linalg.eigvals(A + B @ K).real),
        "prefer": prefer,
        "accept_inconclusive": accept_inconclusive,
    }
    placeholder_E0 = E0 or Box(np.zeros(es.n_x), np.zeros(es.n_x))
    base = FunnelCertificate(V, kappa, 1.0, T_s, placeholder_E0, domains, meta=meta)

    def ok(gamma: float) -> bool:
        return _acceptable(base.with_gamma(gamma), es, settings, accept_inconclusive)

    gammas = np.geomspace(gamma_range[0], gamma_range[1], scan_points)
    passed = [ok(g) for g in gammas]
    logger.debug(f"gamma scan: {sum(passed)} of {len(gammas)} levels acceptable")
    if not any(passed):
        raise CertificationError(f"no gamma in [{gamma_range[0]:.3g}, {gamma_range[1]:.3g}] passes the checks")
    if prefer == "largest":
        i = max(k for k, p in enumerate(passed) if p)
        good, bad = gammas[i], gammas[i + 1] if i + 1 < len(gammas) else None
    else:
        i = min(k for k, p in enumerate(passed) if p)
        good, bad = gammas[i], gammas[i - 1] if i > 0 else None
    if bad is not None:
        for _ in range(bisection_steps):
            mid = float(np.sqrt(good * bad))
            if ok(mid):
                good = mid
            else:
                bad = mid
    gamma = float(good)
    cert = base.with_gamma(gamma)
    eps = compute_epsilon(cert, settings)
    if E0 is None:
        E0 = default_E0(cert, eps, settings)
    cert = cert.with_E0(E0)
    cert.meta["epsilon"] = eps.tolist()
    cert.verdicts = run_checks(cert, es, settings)
    logger.info(f"certificate gamma {gamma:.6g}, verdicts {cert.verdicts}")
    return cert


def default_E0(cert: FunnelCertificate, eps: np.ndarray, settings: Optional[CheckSettings] = None,
               max_halvings: int = 12) -> Box:
    """Half the epsilon box, halved further until it fits in F(0)."""
    scale = 0.5
    for _ in range(max_halvings + 1):
        E0 = Box(-scale * eps, scale * eps)
        if check_initial_containment(cert.with_E0(E0), settings).verified:
            return E0
        scale *= 0.5
    logger.warning("initial error box does not verify inside F(0) after halving")
    return E0


def run_checks(cert: FunnelCertificate, es: ErrorSystem, settings: Optional[CheckSettings] = None) -> Dict[str, str]:
    verdicts = {
        "initial": check_initial_containment(cert, settings),
        "decrease": check_decrease(cert, es, settings=settings),
        "jump": check_jump(cert, es, settings),
    }
    for name, verdict in verdicts.items():
        logger.info(f"{name} condition: {verdict}")
    cert.last_verdicts = verdicts
    return {name: v.status for name, v in verdicts.items()}
