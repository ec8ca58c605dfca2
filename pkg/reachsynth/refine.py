"""
Refinement of the symbolic controller to the concrete model.

The abstract input is held over each sampling period (zero-order hold on
the latched cell) and the low-level funnel controller tracks the companion
abstract trajectory with u = kappa(t mod T_s, e, xhat, uhat).
"""
import logging
from typing import Optional

import numpy as np
from scipy.stats import qmc

from reachsynth.abstraction import InputGrid, TransitionSystem
from reachsynth.errors import LeftWinningSetError
from reachsynth.funnel import ErrorSystem, FunnelCertificate
from reachsynth.games import LOSING, REACH_AVOID, STAY, ControllerTable
from reachsynth.interval_core import Box, PartitionGrid
from reachsynth.intervals import IntervalArray, matvec

logger = logging.getLogger(__name__)

HALTON_POINTS = 32


class HierarchicalController:
    def __init__(self,
                 table: ControllerTable,
                 grid: PartitionGrid,
                 inputs: InputGrid,
                 cert: FunnelCertificate,
                 es: ErrorSystem,
                 T_s: Optional[float] = None):
        if table.num_cells != grid.total_cells:
            raise ValueError(f"controller has {table.num_cells} cells, grid has {grid.total_cells}")
        winning = table.win_set
        undefined = winning & (table.choice < 0)
        if table.mode == REACH_AVOID:
            undefined &= table.status != STAY
        if np.any(undefined):
            raise ValueError(f"{int(undefined.sum())} winning cells have no input")
        if np.any(table.choice[winning] >= len(inputs)):
            raise ValueError("controller refers to inputs outside the input grid")
        self.table = table
        self.grid = grid
        self.inputs = inputs
        self.cert = cert
        self.es = es
        self.T_s = float(T_s if T_s is not None else cert.T_s)
        duhat = cert.domains.get("duhat")
        self.duhat = duhat if duhat is not None and es.nhat_u else None

    @classmethod
    def from_artifacts(cls, ts: TransitionSystem, table: ControllerTable, cert: FunnelCertificate,
                       es: ErrorSystem) -> "HierarchicalController":
        return cls(table, ts.grid, ts.inputs, cert, es)

    def period_of(self, t: float) -> int:
        return int(np.floor(t / self.T_s + 1e-9))

    @property
    def rest_input(self) -> np.ndarray:
        """Abstract input held before any cell has been latched."""
        return np.clip(0.0, self.inputs.domain.lo, self.inputs.domain.hi)

    def initial_input(self, cells) -> np.ndarray:
        """Abstract input latched in `cells` at the first sampling instant."""
        choice = np.asarray(self.table.choice[cells])
        points = self.inputs.points[np.maximum(choice, 0)]
        return np.where((choice >= 0)[..., None], points, self.rest_input)


class SampleLatch:
    """
    Per-run state of the zero-order hold: latched period, cell and the
    abstract input applied over that period.

    Runs that leave the winning set are flagged in `left` when the latch is
    not strict; strict latches raise instead.
    """

    def __init__(self, runs: int = 1, strict: bool = True):
        self.runs = runs
        self.strict = strict
        self.period = -1
        self.cells = np.full(runs, -1, dtype=np.int64)
        self.uhat: Optional[np.ndarray] = None
        self.clamped = np.zeros(runs, dtype=np.int64)
        self.reached = np.zeros(runs, dtype=bool)
        self.left = np.zeros(runs, dtype=bool)

    def capture(self, hc: HierarchicalController, period: int, xhat: np.ndarray, time: float = None):
        cells = np.atleast_1d(hc.grid.cell_of(xhat))
        valid = cells < hc.grid.out
        status = np.full(self.runs, LOSING, dtype=np.int64)
        status[valid] = hc.table.status[cells[valid]]
        losing = (status == LOSING) & ~self.left & ~self.reached
        if np.any(losing):
            if self.strict:
                cell = int(cells[np.flatnonzero(losing)[0]])
                raise LeftWinningSetError(f"cell {cell} is not winning at t={time}", cell=cell, time=time)
            self.left |= losing
            logger.warning(f"{int(losing.sum())} run(s) latched a losing cell in period {period}")
        choice = np.full(self.runs, -1, dtype=np.int64)
        choice[valid] = hc.table.choice[cells[valid]]
        if hc.table.mode == REACH_AVOID:
            self.reached |= (status == STAY) & ~self.left
        has_input = (choice >= 0) & ~self.left & ~self.reached
        new = np.zeros((self.runs, hc.inputs.dim))
        new[has_input] = hc.inputs.points[choice[has_input]]
        if self.uhat is None:
            held = np.broadcast_to(hc.rest_input, new.shape)
        else:
            held = self.uhat
            if hc.duhat is not None:
                delta = new - held
                clipped = np.clip(delta, hc.duhat.lo, hc.duhat.hi)
                over = has_input & np.any(clipped != delta, axis=-1)
                if np.any(over):
                    logger.warning(f"abstract input jump clamped to the jump domain for {int(over.sum())} run(s)")
                    self.clamped += over
                new = np.where(has_input[:, None], held + clipped, new)
        self.uhat = np.where(has_input[:, None], new, held)
        self.cells = cells
        self.period = period


def zoh_control(hc: HierarchicalController, t: float, xhat, latch: SampleLatch) -> np.ndarray:
    """Held abstract input; a new period (t = k T_s included) latches H(xhat)."""
    xhat = np.asarray(xhat, dtype=float)
    k = hc.period_of(t)
    if k != latch.period:
        latch.capture(hc, k, np.atleast_2d(xhat), time=t)
    return latch.uhat[0] if xhat.ndim == 1 else latch.uhat


def composed_control(hc: HierarchicalController, t: float, x, xhat, latch: SampleLatch) -> np.ndarray:
    uhat = zoh_control(hc, t, xhat, latch)
    folded = t - latch.period * hc.T_s
    e = hc.es.error_state(x, xhat, uhat)
    return hc.cert.control(np.asarray(folded), e, xhat, uhat)


class WinningInitialSet:
    """
    Concrete initial states {pi(xhat, K(H(xhat))) | H(xhat) in R} + E0.

    Membership is decided by a bounded witness search; `witness(x)` returns
    an abstract initial state or None.
    """

    def __init__(self, hc: HierarchicalController):
        self.hc = hc
        table = hc.table
        self.cells = np.flatnonzero(table.win_set)
        self.E0 = hc.cert.E0
        e_bound = np.maximum(np.abs(self.E0.lo), np.abs(self.E0.hi))
        slack = hc.es.state_hull(e_bound)
        lo, hi = hc.grid.cell_boxes(self.cells)
        uhat = hc.initial_input(self.cells)
        pi = hc.es.pi
        image = matvec(pi.state_part, IntervalArray(lo, hi)) + matvec(pi.input_part, uhat) + pi.Omega
        self.image_lo = image.lo - slack
        self.image_hi = image.hi + slack
        self._centers = pi.apply(0.5 * (lo + hi), uhat)
        self._sampler = qmc.Halton(d=hc.grid.dim, scramble=False).random(HALTON_POINTS)

    def describe(self) -> dict:
        return {
            "winning_cells": int(len(self.cells)),
            "E0": self.E0.to_json(),
            "bounding_box": Box(self.image_lo.min(axis=0), self.image_hi.max(axis=0)).to_json()
            if len(self.cells) else None,
        }

    def _valid(self, x: np.ndarray, xhat: np.ndarray, cell: int) -> bool:
        hc = self.hc
        if hc.grid.cell_of(xhat) != cell or not hc.table.winning(cell):
            return False
        uhat = hc.initial_input(cell)
        e = hc.es.error_state(x, xhat, uhat)
        return bool(self.E0.contains_point(e))

    def witness(self, x) -> Optional[np.ndarray]:
        x = np.asarray(x, dtype=float)
        near = np.all((self.image_lo <= x) & (x <= self.image_hi), axis=-1)
        candidates = np.flatnonzero(near)
        if candidates.size == 0:
            return None
        distance = np.abs(self._centers[candidates] - x).max(axis=-1)
        candidates = candidates[np.lexsort((self.cells[candidates], distance))]
        for k in candidates:
            cell = int(self.cells[k])
            lo, hi = self.hc.grid.cell_boxes(cell)
            trials = np.vstack([0.5 * (lo + hi), lo + self._sampler * (hi - lo)])
            for xhat in trials:
                if self._valid(x, xhat, cell):
                    return xhat
        return None

    def contains(self, x) -> bool:
        return self.witness(x) is not None

    __contains__ = contains


def winning_initial_set(hc: HierarchicalController) -> WinningInitialSet:
    return WinningInitialSet(hc)
