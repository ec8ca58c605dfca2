"""
Reach-avoid-stay games on a finite abstraction.

The safety stage removes cells from the target until every remaining cell
has a stay input keeping all successors inside. The reachability stage
grows the winning set level by level from the safety result; a cell's rank
is the level at which it entered.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from reachsynth.abstraction import TransitionSystem
from reachsynth.interval_core import Box

logger = logging.getLogger(__name__)

REACH_AVOID_STAY = "reach-avoid-stay"
REACH_AVOID = "reach-avoid"
MODES = (REACH_AVOID_STAY, REACH_AVOID)

LOSING, REACH, STAY = 0, 1, 2


class GameSpec:
    def __init__(self, target_cells, stay_inputs: Sequence[int], all_inputs: Sequence[int],
                 num_cells: int, mode: str = REACH_AVOID_STAY):
        if mode not in MODES:
            raise ValueError(f"unknown game mode {mode!r}, expected one of {MODES}")
        target = np.zeros(num_cells, dtype=bool)
        target_cells = np.asarray(target_cells)
        if target_cells.dtype == bool:
            if target_cells.shape != (num_cells,):
                raise ValueError("target mask does not match the number of cells")
            target |= target_cells
        elif target_cells.size:
            if target_cells.min() < 0 or target_cells.max() >= num_cells:
                raise ValueError("target cells must exclude Out")
            target[target_cells] = True
        stay = sorted(set(int(u) for u in stay_inputs))
        every = sorted(set(int(u) for u in all_inputs))
        if not set(stay) <= set(every):
            raise ValueError("stay inputs must be a subset of all inputs")
        self.target = target
        self.stay_inputs = np.array(stay, dtype=np.int64)
        self.all_inputs = np.array(every, dtype=np.int64)
        self.mode = mode

    @property
    def target_cells(self) -> np.ndarray:
        return np.flatnonzero(self.target)


def game_spec_from_sets(ts: TransitionSystem, target: Box, stay_inputs: Optional[Box] = None,
                        mode: str = REACH_AVOID_STAY) -> GameSpec:
    """Target = safe cells contained in `target`; stay inputs = grid points in `stay_inputs`."""
    lo, hi = ts.grid.cell_boxes(np.arange(ts.num_cells))
    inside = np.all((target.lo <= lo) & (hi <= target.hi), axis=-1) & ts.safe_mask
    all_inputs = np.arange(ts.num_inputs)
    if stay_inputs is None:
        stay = all_inputs
    else:
        stay = np.flatnonzero(np.atleast_1d(stay_inputs.contains_point(ts.inputs.points)))
    return GameSpec(inside, stay, all_inputs, ts.num_cells, mode)


@dataclass
class SafetyResult:
    stay: np.ndarray
    choice: np.ndarray
    iterations: int = 0
    sizes: List[int] = field(default_factory=list)


@dataclass
class ReachResult:
    win: np.ndarray
    choice: np.ndarray
    rank: np.ndarray
    iterations: int = 0
    sizes: List[int] = field(default_factory=list)


class ControllerTable:
    """
    Symbolic controller: per cell a status (losing, reach, stay), an input
    index (-1 where undefined) and a rank (-1 outside the winning set).
    """

    def __init__(self, status: np.ndarray, choice: np.ndarray, rank: np.ndarray,
                 mode: str = REACH_AVOID_STAY, config_digest: str = "", stats: Optional[dict] = None):
        self.status = np.asarray(status, dtype=np.uint8)
        self.choice = np.asarray(choice, dtype=np.int32)
        self.rank = np.asarray(rank, dtype=np.int32)
        self.mode = mode
        self.config_digest = config_digest
        self.stats = dict(stats or {})
        for arr in (self.status, self.choice, self.rank):
            arr.setflags(write=False)

    @property
    def num_cells(self) -> int:
        return self.status.size

    @property
    def stay_set(self) -> np.ndarray:
        return self.status == STAY

    @property
    def win_set(self) -> np.ndarray:
        return self.status != LOSING

    def winning(self, cell: int) -> bool:
        return 0 <= cell < self.num_cells and self.status[cell] != LOSING

    def input_for(self, cell: int) -> int:
        return int(self.choice[cell])


def _gather_ranges(offsets: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Concatenate the ranges offsets[k]:offsets[k + 1] for every key."""
    starts = offsets[keys]
    lengths = offsets[keys + 1] - starts
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    shift = np.repeat(starts - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    return np.arange(total, dtype=np.int64) + shift


class _Predecessors:
    """Successor entries grouped by target cell (Out included)."""

    def __init__(self, ts: TransitionSystem):
        succ = ts.successors.astype(np.int64)
        self.order = np.argsort(succ, kind="stable")
        counts = np.bincount(succ, minlength=ts.num_cells + 1)
        self.offsets = np.zeros(ts.num_cells + 2, dtype=np.int64)
        np.cumsum(counts, out=self.offsets[1:])
        self.pair_of_entry = ts.pair_ids()

    def pairs_into(self, cells: np.ndarray) -> np.ndarray:
        entries = self.order[_gather_ranges(self.offsets, np.asarray(cells, dtype=np.int64))]
        return self.pair_of_entry[entries]


def _first_true(mask: np.ndarray) -> np.ndarray:
    """Index of the first True per row, -1 for rows without one."""
    first = np.argmax(mask, axis=1)
    return np.where(mask.any(axis=1), first, -1)


def _blocked_counts(ts: TransitionSystem, member: np.ndarray) -> np.ndarray:
    """Per pair, the number of successors outside `member` (Out never a member)."""
    inside = np.concatenate([member, [False]])[ts.successors]
    counts = np.bincount(ts.pair_ids()[~inside], minlength=ts.num_cells * ts.num_inputs)
    return counts.astype(np.int64)


def solve_safety(ts: TransitionSystem, spec: GameSpec) -> SafetyResult:
    N, K = ts.num_cells, ts.num_inputs
    allowed = np.zeros(K, dtype=bool)
    allowed[spec.stay_inputs] = True
    stay = spec.target & ts.safe_mask
    if spec.mode == REACH_AVOID:
        logger.info(f"reach-avoid game: safety stage skipped, |S| = {int(stay.sum())}")
        return SafetyResult(stay, np.full(N, -1, dtype=np.int64), 0, [int(stay.sum())])

    blocked = _blocked_counts(ts, stay).reshape(N, K)
    blocked[:, ~allowed] = np.iinfo(np.int64).max // 2
    preds = _Predecessors(ts)
    sizes = [int(stay.sum())]
    iterations = 0
    while True:
        iterations += 1
        alive = stay & np.any(blocked == 0, axis=1)
        removed = np.flatnonzero(stay & ~alive)
        if removed.size == 0:
            break
        stay = alive
        pairs = preds.pairs_into(removed)
        np.add.at(blocked.reshape(-1), pairs, 1)
        if int(stay.sum()) > sizes[-1]:
            raise AssertionError("safety iteration grew the stay set")
        sizes.append(int(stay.sum()))
        logger.debug(f"safety iteration {iterations}: removed {removed.size} cells, {sizes[-1]} remain")

    choice = np.where(stay, _first_true(blocked == 0), -1)
    logger.info(f"safety fixed point after {iterations} iterations: |S| = {int(stay.sum())}")
    return SafetyResult(stay, choice, iterations, sizes)


def solve_reach(ts: TransitionSystem, S: np.ndarray, all_inputs: Sequence[int]) -> ReachResult:
    N, K = ts.num_cells, ts.num_inputs
    S = np.asarray(S, dtype=bool)
    allowed = np.zeros(K, dtype=bool)
    allowed[np.asarray(all_inputs, dtype=np.int64)] = True
    win = S.copy()
    rank = np.where(S, 0, -1).astype(np.int64)
    choice = np.full(N, -1, dtype=np.int64)
    pending = _blocked_counts(ts, win).reshape(N, K)
    pending[:, ~allowed] = np.iinfo(np.int64).max // 2
    preds = _Predecessors(ts)

    sizes = [int(win.sum())]
    frontier = np.flatnonzero(win)
    level = 0
    # cells that can already step into S before any decrement
    ready = ~win & ts.safe_mask & np.any(pending == 0, axis=1)
    while True:
        level += 1
        if level > 1:
            pairs = preds.pairs_into(frontier)
            np.subtract.at(pending.reshape(-1), pairs, 1)
            ready = ~win & ts.safe_mask & np.any(pending == 0, axis=1)
        new = np.flatnonzero(ready)
        if new.size == 0:
            break
        choice[new] = _first_true(pending[new] == 0)
        rank[new] = level
        win[new] = True
        frontier = new
        sizes.append(int(win.sum()))
        logger.debug(f"reach level {level}: {new.size} cells added")

    logger.info(f"reach fixed point after {level - 1} levels: |R| = {int(win.sum())}")
    return ReachResult(win, choice, rank, level - 1, sizes)


def extract_controller(safety: SafetyResult, reach: ReachResult, mode: str = REACH_AVOID_STAY,
                       config_digest: str = "") -> ControllerTable:
    status = np.where(safety.stay, STAY, np.where(reach.win, REACH, LOSING))
    choice = np.where(safety.stay, safety.choice, np.where(reach.win, reach.choice, -1))
    rank = np.where(reach.win, reach.rank, -1)
    stats = {
        "stay_cells": int(safety.stay.sum()),
        "win_cells": int(reach.win.sum()),
        "safety_iterations": safety.iterations,
        "reach_levels": reach.iterations,
    }
    table = ControllerTable(status, choice, rank, mode, config_digest, stats)
    table.stats["coverage"] = coverage(table)
    return table


def synthesize(ts: TransitionSystem, spec: GameSpec) -> ControllerTable:
    safety = solve_safety(ts, spec)
    reach = solve_reach(ts, safety.stay, spec.all_inputs)
    return extract_controller(safety, reach, spec.mode, ts.config_digest)


def coverage(table: ControllerTable) -> float:
    if table.num_cells == 0:
        return 0.0
    return float(table.win_set.sum()) / table.num_cells


def check_controller(ts: TransitionSystem, table: ControllerTable) -> List[str]:
    """Re-check invariance on S and rank decrease on R \\ S by direct scan."""
    problems = []
    rank = np.concatenate([table.rank, [-1]])
    for s in np.flatnonzero(table.win_set):
        u = int(table.choice[s])
        if table.status[s] == STAY:
            if table.mode == REACH_AVOID:
                continue
            succ = ts.successors_of(int(s), u)
            if np.any(succ == ts.out) or not np.all(table.stay_set[succ]):
                problems.append(f"stay cell {s} leaves S under input {u}")
            continue
        succ = ts.successors_of(int(s), u)
        if np.any(succ == ts.out):
            problems.append(f"reach cell {s} can reach Out under input {u}")
            continue
        if np.any(rank[succ] < 0) or np.any(rank[succ] >= table.rank[s]):
            problems.append(f"reach cell {s} has a successor without smaller rank under input {u}")
    return problems


def solve_safety_naive(ts: TransitionSystem, spec: GameSpec) -> SafetyResult:
    """Literal rescan fixed point, kept as a reference solver."""
    stay = set(np.flatnonzero(spec.target & ts.safe_mask).tolist())
    if spec.mode == REACH_AVOID:
        mask = np.zeros(ts.num_cells, dtype=bool)
        mask[list(stay)] = True
        return SafetyResult(mask, np.full(ts.num_cells, -1, dtype=np.int64), 0, [len(stay)])
    sizes = [len(stay)]
    iterations = 0
    while True:
        iterations += 1
        kept = {s for s in stay if any(set(successors_list(ts, s, u)) <= stay for u in spec.stay_inputs)}
        if kept == stay:
            break
        stay = kept
        sizes.append(len(stay))
    mask = np.zeros(ts.num_cells, dtype=bool)
    choice = np.full(ts.num_cells, -1, dtype=np.int64)
    for s in stay:
        mask[s] = True
        choice[s] = min(int(u) for u in spec.stay_inputs if set(successors_list(ts, s, u)) <= stay)
    return SafetyResult(mask, choice, iterations, sizes)


def solve_reach_naive(ts: TransitionSystem, S: np.ndarray, all_inputs: Sequence[int]) -> ReachResult:
    win = set(np.flatnonzero(S).tolist())
    rank = np.where(S, 0, -1).astype(np.int64)
    choice = np.full(ts.num_cells, -1, dtype=np.int64)
    sizes = [len(win)]
    level = 0
    while True:
        level += 1
        added = {}
        for s in range(ts.num_cells):
            if s in win or not ts.safe_mask[s]:
                continue
            good = [int(u) for u in all_inputs if set(successors_list(ts, s, u)) <= win]
            if good:
                added[s] = min(good)
        if not added:
            break
        for s, u in added.items():
            win.add(s)
            rank[s] = level
            choice[s] = u
        sizes.append(len(win))
    mask = np.zeros(ts.num_cells, dtype=bool)
    mask[list(win)] = True
    return ReachResult(mask, choice, rank, level - 1, sizes)


def successors_list(ts: TransitionSystem, s: int, u) -> List[int]:
    return ts.successors_of(int(s), int(u)).tolist()
