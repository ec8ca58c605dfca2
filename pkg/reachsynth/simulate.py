"""
Closed-loop simulation of the concrete model and its companion abstract
trajectory under the hierarchical controller, with specification
monitoring and Monte Carlo batches.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from reachsynth.errors import LeftWinningSetError
from reachsynth.games import REACH_AVOID, REACH_AVOID_STAY
from reachsynth.interval_core import Box
from reachsynth.models import ModelBundle
from reachsynth.refine import HierarchicalController, SampleLatch, winning_initial_set

logger = logging.getLogger(__name__)

SATISFIED = "satisfied"
VIOLATED = "violated"
NOT_IN_X0 = "not-in-X0"


def _columns(values, rows: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return values[:, None] if values.size else np.zeros((rows, 0))
    return values


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    disturbances: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = _columns(self.states, len(self.times))
        self.controls = _columns(self.controls, len(self.times))
        self.disturbances = _columns(self.disturbances, len(self.times))
        if not (len(self.states) == len(self.controls) == len(self.disturbances) == len(self.times)):
            raise ValueError("trajectory arrays must have one row per time")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return len(self.times)


class PiecewiseConstantSignal:
    def __init__(self, values, switch_period: float):
        if not switch_period > 0:
            raise ValueError(f"switch_period must be positive, got {switch_period}")
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        self.switch_period = float(switch_period)

    def piece(self, t) -> Union[int, np.ndarray]:
        idx = np.floor(np.asarray(t, dtype=float) / self.switch_period + 1e-9).astype(np.int64)
        return np.clip(idx, 0, len(self.values) - 1)

    def __call__(self, t) -> np.ndarray:
        return self.values[self.piece(t)]


def _signal_values(rng: np.random.Generator, W: Box, pieces: int) -> np.ndarray:
    return W.lo + (W.hi - W.lo) * rng.random((pieces, W.dim))


def random_disturbance(W: Box, duration: float, switch_period: float, seed=None) -> PiecewiseConstantSignal:
    """Uniform values in W, switching every `switch_period`, reproducible from the seed."""
    if not switch_period > 0:
        raise ValueError(f"switch_period must be positive, got {switch_period}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pieces = int(math.floor(duration / switch_period + 1e-9)) + 1
    return PiecewiseConstantSignal(_signal_values(rng, W, pieces), switch_period)


class SpecMonitor:
    def __init__(self, X: Box, X_a: Sequence[Box], X_r: Box, mode: str = REACH_AVOID_STAY):
        if mode not in (REACH_AVOID, REACH_AVOID_STAY):
            raise ValueError(f"unknown specification mode {mode!r}")
        for box in list(X_a) + [X_r]:
            if box.dim != X.dim:
                raise ValueError("specification boxes must share the dimension of X")
        self.X = X
        self.X_a = tuple(X_a)
        self.X_r = X_r
        self.mode = mode


@dataclass
class MonitorVerdict:
    status: str
    time: Optional[float] = None
    reason: str = ""

    @property
    def satisfied(self) -> bool:
        return self.status == SATISFIED


class _MonitorState:
    """Sample-by-sample monitor over a batch of runs."""
    PENDING, IN_TARGET, DONE = 0, 1, 2

    def __init__(self, spec: SpecMonitor, runs: int):
        self.spec = spec
        self.phase = np.full(runs, self.PENDING)
        self.status = [""] * runs
        self.time = np.full(runs, np.nan)
        self.reason = [""] * runs

    def _close(self, runs: np.ndarray, status: str, t: float, reason: str):
        for r in runs:
            self.phase[r] = self.DONE
            self.status[r] = status
            self.time[r] = t
            self.reason[r] = reason

    def update(self, t: float, states: np.ndarray, active: np.ndarray):
        spec = self.spec
        live = active & (self.phase != self.DONE)
        if not np.any(live):
            return
        outside = ~np.atleast_1d(spec.X.contains_point(states))
        in_avoid = np.zeros(len(states), dtype=bool)
        for box in spec.X_a:
            in_avoid |= np.atleast_1d(box.contains_point(states))
        in_target = np.atleast_1d(spec.X_r.contains_point(states))
        self._close(np.flatnonzero(live & outside), VIOLATED, t, "left the safe domain")
        self._close(np.flatnonzero(live & ~outside & in_avoid), VIOLATED, t, "entered an avoid set")
        live &= self.phase != self.DONE
        if spec.mode == REACH_AVOID:
            self._close(np.flatnonzero(live & in_target), SATISFIED, t, "")
            return
        left = live & (self.phase == self.IN_TARGET) & ~in_target
        self._close(np.flatnonzero(left), VIOLATED, t, "left the target after reaching it")
        entering = live & (self.phase == self.PENDING) & in_target
        self.phase[entering] = self.IN_TARGET
        self.time[entering] = t

    def finish(self) -> List[MonitorVerdict]:
        verdicts = []
        for r, phase in enumerate(self.phase):
            if phase == self.DONE:
                verdicts.append(MonitorVerdict(self.status[r], float(self.time[r]), self.reason[r]))
            elif phase == self.IN_TARGET:
                verdicts.append(MonitorVerdict(SATISFIED, float(self.time[r])))
            else:
                verdicts.append(MonitorVerdict(VIOLATED, None, "target never reached"))
        return verdicts


def monitor(spec: SpecMonitor, traj: Trajectory) -> MonitorVerdict:
    state = _MonitorState(spec, 1)
    active = np.ones(1, dtype=bool)
    for t, x in zip(traj.times, traj.states):
        state.update(float(t), x[None, :], active)
    return state.finish()[0]


def steps_per_period(T_s: float, dt: float) -> int:
    steps = int(round(T_s / dt))
    if steps < 1 or abs(steps * dt - T_s) > 1e-9 * T_s:
        raise ValueError(f"dt={dt} does not divide the sampling period {T_s}")
    return steps


@dataclass
class SimulationSettings:
    duration: float
    dt: float
    switch_period: float = 1.0
    randomize_what: bool = False

    def __post_init__(self):
        if not self.duration > 0 or not self.dt > 0:
            raise ValueError("duration and dt must be positive")


@dataclass
class BatchRun:
    """Outcome of one batch of co-simulated runs."""
    verdicts: List[MonitorVerdict]
    max_error_ratio: np.ndarray
    clamped: np.ndarray
    left: np.ndarray
    reached: np.ndarray
    traces: Dict[int, Tuple[Trajectory, Trajectory]] = field(default_factory=dict)


def _control(hc: HierarchicalController, tt: float, x, xhat, uhat) -> np.ndarray:
    e = hc.es.error_state(x, xhat, uhat)
    return hc.cert.control(np.full(len(x), tt), e, xhat, uhat)


def _traces(buffers: Dict[str, list], record: Sequence[int]) -> Dict[int, Tuple[Trajectory, Trajectory]]:
    times = np.array(buffers["t"])
    out = {}
    for k, run in enumerate(record):
        n = buffers["length"][k]
        concrete = Trajectory(times[:n], np.array([s[k] for s in buffers["x"][:n]]),
                              np.array([s[k] for s in buffers["u"][:n]]), np.array([s[k] for s in buffers["w"][:n]]))
        abstract = Trajectory(times[:n], np.array([s[k] for s in buffers["xhat"][:n]]),
                              np.array([s[k] for s in buffers["uhat"][:n]]),
                              np.array([s[k] for s in buffers["what"][:n]]))
        out[run] = (concrete, abstract)
    return out


def simulate_batch(bundle: ModelBundle,
                   hc: HierarchicalController,
                   x0: np.ndarray,
                   xhat0: np.ndarray,
                   w_values: np.ndarray,
                   what_values: np.ndarray,
                   settings: SimulationSettings,
                   spec: Optional[SpecMonitor] = None,
                   eps: Optional[np.ndarray] = None,
                   record: Sequence[int] = (),
                   strict: bool = False) -> BatchRun:
    """
    Co-integrate B concrete/abstract pairs with RK4 at step dt.

    `w_values` and `what_values` hold (B, pieces, dim) piecewise-constant
    disturbance values switching every `settings.switch_period`. Runs end
    at the duration, or in reach-avoid mode once their latch reaches the
    stay set, or when they leave the winning set.
    """
    es = hc.es
    x = np.array(x0, dtype=float, ndmin=2)
    xhat = np.array(xhat0, dtype=float, ndmin=2)
    runs = len(x)
    per_period = steps_per_period(hc.T_s, settings.dt)
    n_steps = int(math.ceil(settings.duration / settings.dt - 1e-9))
    dt = settings.dt
    latch = SampleLatch(runs, strict=strict)
    watch = _MonitorState(spec, runs) if spec is not None else None
    eps = None if eps is None else np.asarray(eps, dtype=float)
    ratio = np.zeros(runs)
    active = np.ones(runs, dtype=bool)
    record = list(record)
    buffers = {k: [] for k in ("t", "x", "u", "w", "xhat", "uhat", "what")}
    buffers["length"] = [0] * len(record)
    pieces = w_values.shape[1]

    def track_error(xs, xhs, uhat, mask):
        if eps is None:
            return
        e = es.error_state(xs, xhs, uhat)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(eps > 0, np.abs(e) / eps, np.where(np.abs(e) > 0, np.inf, 0.0)).max(axis=-1)
        np.maximum(ratio, np.where(mask, r, 0.0), out=ratio)

    for i in range(n_steps + 1):
        t = i * dt
        piece = min(int(math.floor(t / settings.switch_period + 1e-9)), pieces - 1)
        w = w_values[:, piece]
        what = what_values[:, piece]
        if i % per_period == 0:
            try:
                latch.capture(hc, i // per_period, xhat, time=t)
            except LeftWinningSetError as exc:
                buffers["length"] = [len(buffers["t"])] * len(record)
                exc.trace = _traces(buffers, record) if record else None
                raise
            ending = active & (latch.reached | latch.left)
        else:
            ending = np.zeros(runs, dtype=bool)
        uhat = latch.uhat
        tt = (i % per_period) * dt
        u = _control(hc, tt, x, xhat, uhat)
        live = active & ~latch.left
        track_error(x, xhat, uhat, live)
        if watch is not None:
            watch.update(t, x, active)
        if record:
            buffers["t"].append(t)
            for key, value in (("x", x), ("u", u), ("w", w), ("xhat", xhat), ("uhat", uhat), ("what", what)):
                buffers[key].append(value[record].copy())
            for k, run in enumerate(record):
                if active[run]:
                    buffers["length"][k] = len(buffers["t"])
        active &= ~ending
        if i == n_steps or not np.any(active):
            break

        def rhs(s, xs, xhs):
            us = _control(hc, tt + s, xs, xhs, uhat)
            return bundle.concrete.eval(xs, us, w), bundle.abstract.eval(xhs, uhat, what)

        k1, c1 = rhs(0.0, x, xhat)
        k2, c2 = rhs(0.5 * dt, x + 0.5 * dt * k1, xhat + 0.5 * dt * c1)
        k3, c3 = rhs(0.5 * dt, x + 0.5 * dt * k2, xhat + 0.5 * dt * c2)
        k4, c4 = rhs(dt, x + dt * k3, xhat + dt * c3)
        x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        xhat_next = xhat + dt / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        # error just before the next sampling instant uses the old input
        track_error(x_next, xhat_next, uhat, active & ~latch.left)
        x = np.where(active[:, None], x_next, x)
        xhat = np.where(active[:, None], xhat_next, xhat)

    verdicts = watch.finish() if watch is not None else [MonitorVerdict(SATISFIED) for _ in range(runs)]
    for r in np.flatnonzero(latch.left):
        verdicts[r] = MonitorVerdict(VIOLATED, verdicts[r].time, "left the winning set")
    return BatchRun(verdicts, ratio, latch.clamped.copy(), latch.left.copy(), latch.reached.copy(),
                    _traces(buffers, record) if record else {})


def simulate_closed_loop(bundle: ModelBundle,
                         hc: HierarchicalController,
                         x0,
                         xhat0,
                         w_signal: PiecewiseConstantSignal,
                         what_signal: PiecewiseConstantSignal,
                         duration: float,
                         dt: float) -> Tuple[Trajectory, Trajectory]:
    """Single run; leaving the winning set raises with the trace so far attached."""
    if abs(w_signal.switch_period - what_signal.switch_period) > 1e-12:
        raise ValueError("disturbance signals must switch on the same period")
    settings = SimulationSettings(duration, dt, w_signal.switch_period)
    result = simulate_batch(bundle, hc, np.asarray(x0)[None], np.asarray(xhat0)[None],
                            w_signal.values[None], _match_pieces(what_signal.values, len(w_signal.values))[None],
                            settings, record=[0], strict=True)
    return result.traces[0]


def _match_pieces(values: np.ndarray, pieces: int) -> np.ndarray:
    if len(values) >= pieces:
        return values[:pieces]
    return np.vstack([values, np.repeat(values[-1:], pieces - len(values), axis=0)])


@dataclass
class RunRecord:
    run: int
    status: str
    time: Optional[float] = None
    reason: str = ""
    x0: Optional[List[float]] = None
    xhat0: Optional[List[float]] = None
    max_error_ratio: Optional[float] = None
    clamped_jumps: int = 0

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


@dataclass
class BatchReport:
    records: List[RunRecord]
    traces: Dict[int, Tuple[Trajectory, Trajectory]] = field(default_factory=dict)

    def summary(self) -> dict:
        counts = {SATISFIED: 0, VIOLATED: 0, NOT_IN_X0: 0}
        for rec in self.records:
            counts[rec.status] += 1
        ratios = [r.max_error_ratio for r in self.records if r.max_error_ratio is not None]
        return {
            "runs": len(self.records),
            "satisfied": counts[SATISFIED],
            "violated": counts[VIOLATED],
            "not_in_x0": counts[NOT_IN_X0],
            "max_error_ratio": max(ratios) if ratios else None,
            "funnel_violations": sum(1 for r in ratios if r > 1.0),
            "clamped_jumps": sum(r.clamped_jumps for r in self.records),
        }

    def to_json(self) -> dict:
        return {"summary": self.summary(), "runs": [r.to_json() for r in self.records]}


def monte_carlo(bundle: ModelBundle,
                hc: HierarchicalController,
                spec: SpecMonitor,
                region: Box,
                W: Box,
                What: Box,
                runs: int,
                seed: int,
                settings: SimulationSettings,
                eps: Optional[np.ndarray] = None,
                record: Sequence[int] = (0,)) -> BatchReport:
    """
    Randomized closed-loop runs from the winning initial set.

    Each run draws its abstract start in a random winning cell meeting
    `region` (abstract coordinates), an error in E0 and its disturbance
    signals from its own generator, so results do not depend on batching.
    """
    if runs == 0:
        return BatchReport([])
    es = hc.es
    initial = winning_initial_set(hc)
    lo, hi = hc.grid.cell_boxes(initial.cells)
    meets = np.all((lo <= region.hi) & (hi >= region.lo), axis=-1)
    cells = initial.cells[meets]
    lo, hi = np.maximum(lo[meets], region.lo), np.minimum(hi[meets], region.hi)
    pieces = int(math.floor(settings.duration / settings.switch_period + 1e-9)) + 1
    E0 = hc.cert.E0

    records: List[RunRecord] = []
    starts, witnesses, w_all, what_all, ids = [], [], [], [], []
    for run, child in enumerate(np.random.SeedSequence(seed).spawn(runs)):
        rng = np.random.default_rng(child)
        w_values = _signal_values(rng, W, pieces)
        what_values = _signal_values(rng, What, pieces) if settings.randomize_what else np.zeros((pieces, What.dim))
        if len(cells) == 0:
            records.append(RunRecord(run, NOT_IN_X0, reason="no winning cell meets the initial region"))
            continue
        k = int(rng.integers(len(cells)))
        xhat = lo[k] + rng.random(hc.grid.dim) * (hi[k] - lo[k])
        uhat = hc.initial_input(cells[k])
        e = E0.lo + rng.random(E0.dim) * (E0.hi - E0.lo)
        x = es.concrete_state(e, xhat, uhat)
        witness = initial.witness(x)
        if witness is None:
            records.append(RunRecord(run, NOT_IN_X0, reason="no witness in the winning initial set",
                                     x0=x.tolist()))
            continue
        records.append(RunRecord(run, "", x0=x.tolist(), xhat0=witness.tolist()))
        starts.append(x)
        witnesses.append(witness)
        w_all.append(w_values)
        what_all.append(what_values)
        ids.append(run)

    traces = {}
    if ids:
        position = {run: k for k, run in enumerate(ids)}
        wanted = [position[r] for r in record if r in position]
        result = simulate_batch(bundle, hc, np.array(starts), np.array(witnesses), np.array(w_all),
                                np.array(what_all), settings, spec=spec, eps=eps, record=wanted)
        by_run = {rec.run: rec for rec in records}
        for k, run in enumerate(ids):
            rec = by_run[run]
            verdict = result.verdicts[k]
            rec.status, rec.time, rec.reason = verdict.status, verdict.time, verdict.reason
            rec.max_error_ratio = float(result.max_error_ratio[k]) if eps is not None else None
            rec.clamped_jumps = int(result.clamped[k])
        traces = {ids[k]: trace for k, trace in result.traces.items()}
    report = BatchReport(records, traces)
    logger.info(f"Monte Carlo summary: {report.summary()}")
    return report
