"""
Finite abstraction (cells, inputs, delta) of a sampled continuous system.

Successor sets are stored in compressed rows: the successors of pair
(s, j) are `successors[offsets[p]:offsets[p + 1]]` with
p = s * num_inputs + j. The `Out` symbol is `grid.total_cells`.
"""
import itertools
import logging
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from reachsynth.interval_core import AffineMap, Box, EMPTY, PartitionGrid, preimage_pi
from reachsynth.reachability import DecompositionFunction, ReachSettings, VectorField, embed_integrate_batch

logger = logging.getLogger(__name__)

SHARD_CELLS = 256
PAIR_CHUNK = 4096


class InputGrid:
    """
    Uniform grid of representative inputs, endpoints included.

    `all_points` is the full product grid, dimension 0 slowest; `points`
    keeps those outside every avoided input box.
    """

    def __init__(self, domain: Box, values_per_dim: Sequence[int], avoid: Sequence[Box] = ()):
        if not domain.is_bounded():
            raise ValueError(f"input domain must be bounded, got {domain}")
        values = [int(v) for v in values_per_dim]
        if len(values) != domain.dim or any(v < 1 for v in values):
            raise ValueError(f"values_per_dim {values} does not fit a {domain.dim}-d input domain")
        self.domain = domain
        self.values_per_dim = tuple(values)
        axes = [
            np.linspace(lo, hi, v) if v > 1 else np.array([0.5 * (lo + hi)])
            for lo, hi, v in zip(domain.lo, domain.hi, values)
        ]
        self.all_points = np.array(list(itertools.product(*axes)), dtype=float)
        keep = np.ones(len(self.all_points), dtype=bool)
        for box in avoid:
            keep &= ~box.contains_point(self.all_points)
        self.avoid = tuple(avoid)
        self.points = self.all_points[keep]
        self.points.setflags(write=False)
        if len(self.points) == 0:
            logger.warning("every input grid point lies in an avoided input set")

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def index_of(self, u) -> int:
        """Index of the grid point nearest to u."""
        dist = np.abs(self.points - np.asarray(u, dtype=float)).max(axis=1)
        return int(np.argmin(dist))

    def to_json(self) -> dict:
        return {
            "domain": self.domain.to_json(),
            "values_per_dim": list(self.values_per_dim),
            "avoid": [b.to_json() for b in self.avoid],
        }

    @classmethod
    def from_json(cls, data: dict) -> "InputGrid":
        return cls(Box.from_json(data["domain"]), data["values_per_dim"],
                   [Box.from_json(b) for b in data.get("avoid", [])])


class TransitionSystem:
    def __init__(self,
                 grid: PartitionGrid,
                 inputs: InputGrid,
                 offsets: np.ndarray,
                 successors: np.ndarray,
                 safe_mask: np.ndarray,
                 reach_lo: np.ndarray,
                 reach_hi: np.ndarray,
                 stats: Optional[Dict] = None,
                 config_digest: str = ""):
        self.grid = grid
        self.inputs = inputs
        self.offsets = np.asarray(offsets, dtype=np.int64)
        self.successors = np.asarray(successors, dtype=np.int32)
        self.safe_mask = np.asarray(safe_mask, dtype=bool)
        self.reach_lo = np.asarray(reach_lo, dtype=float)
        self.reach_hi = np.asarray(reach_hi, dtype=float)
        self.stats = dict(stats or {})
        self.config_digest = config_digest
        self.wall_time = None
        for arr in (self.offsets, self.successors, self.safe_mask, self.reach_lo, self.reach_hi):
            arr.setflags(write=False)
        expected = grid.total_cells * len(inputs) + 1
        if self.offsets.size != expected:
            raise ValueError(f"offsets has {self.offsets.size} entries, expected {expected}")

    @property
    def num_cells(self) -> int:
        return self.grid.total_cells

    @property
    def num_inputs(self) -> int:
        return len(self.inputs)

    @property
    def out(self) -> int:
        return self.grid.total_cells

    @property
    def num_transitions(self) -> int:
        return int(self.successors.size)

    def pair_index(self, s: int, u: int) -> int:
        return s * self.num_inputs + u

    def successors_of(self, s: int, u: int) -> np.ndarray:
        if s == self.out:
            raise ValueError("the Out symbol has no outgoing transitions")
        if not 0 <= s < self.num_cells or not 0 <= u < self.num_inputs:
            raise IndexError(f"pair ({s}, {u}) outside the abstraction")
        p = self.pair_index(s, u)
        return self.successors[self.offsets[p]:self.offsets[p + 1]]

    def reach_box(self, s: int, u: int):
        """Stored over-approximation of the pair, EMPTY where none was computed."""
        p = self.pair_index(s, u)
        lo, hi = self.reach_lo[p], self.reach_hi[p]
        if np.any(np.isnan(lo)):
            return EMPTY
        return Box(lo, hi)

    def pair_sources(self) -> np.ndarray:
        """Source cell of every stored successor entry."""
        counts = np.diff(self.offsets)
        return np.repeat(np.arange(self.num_cells * self.num_inputs, dtype=np.int64) // self.num_inputs, counts)

    def pair_ids(self) -> np.ndarray:
        """Pair index of every stored successor entry."""
        counts = np.diff(self.offsets)
        return np.repeat(np.arange(self.num_cells * self.num_inputs, dtype=np.int64), counts)


def successors(ts: TransitionSystem, s: int, u: int) -> List[int]:
    return ts.successors_of(s, u).tolist()


def cells_meeting(grid: PartitionGrid, boxes: Sequence[Box]) -> np.ndarray:
    """Mask of cells whose closure meets any of the boxes."""
    mask = np.zeros(grid.total_cells, dtype=bool)
    for box in boxes:
        if box is EMPTY:
            continue
        if np.any(box.hi < grid.domain.lo) or np.any(box.lo > grid.domain.hi):
            continue
        rel_lo = (np.clip(box.lo, grid.domain.lo, grid.domain.hi) - grid.domain.lo) / grid.widths
        rel_hi = (np.clip(box.hi, grid.domain.lo, grid.domain.hi) - grid.domain.lo) / grid.widths
        # a face shared with the previous cell counts for both
        first = np.clip(np.ceil(rel_lo).astype(np.int64) - 1, 0, grid.cells_per_dim - 1)
        last = np.clip(np.floor(rel_hi).astype(np.int64), 0, grid.cells_per_dim - 1)
        ranges = [np.arange(f, l + 1) for f, l in zip(first, last)]
        multi = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(-1, grid.dim)
        mask[grid.flat_index(multi)] = True
    return mask


def cells_outside(grid: PartitionGrid, safe: Box) -> np.ndarray:
    """Mask of cells not contained in `safe`."""
    lo, hi = grid.cell_boxes(np.arange(grid.total_cells))
    return ~np.all((safe.lo <= lo) & (hi <= safe.hi), axis=-1)


def classify_avoid(pi: AffineMap, avoid_boxes: Sequence[Box]) -> Tuple[List[Box], List[Box], List[Tuple[Box, Box]]]:
    """
    Split concrete avoid sets by their abstract preimage.

    Returns (state boxes, input boxes, joint box pairs): a preimage with an
    unconstrained input part avoids cells, one with an unconstrained state
    part avoids inputs, anything else forbids the (cell, input) pairs it
    covers.
    """
    state_boxes, input_boxes, joint = [], [], []
    for X_a in avoid_boxes:
        xhat, uhat = preimage_pi(pi, X_a, pi.nhat_x, pi.nhat_u)
        if xhat is EMPTY:
            continue
        u_free = not np.any(uhat.bounded_dims())
        x_free = not np.any(xhat.bounded_dims())
        if u_free:
            state_boxes.append(xhat)
        elif x_free:
            input_boxes.append(uhat)
        else:
            joint.append((xhat, uhat))
    return state_boxes, input_boxes, joint


def forbidden_pairs(grid: PartitionGrid, inputs: InputGrid, joint: Sequence[Tuple[Box, Box]]) -> np.ndarray:
    mask = np.zeros((grid.total_cells, len(inputs)), dtype=bool)
    for xhat, uhat in joint:
        cells = cells_meeting(grid, [xhat])
        hit = uhat.contains_point(inputs.points)
        mask |= cells[:, None] & np.atleast_1d(hit)[None, :]
    return mask


def _enumerate_successors(grid: PartitionGrid, first: np.ndarray, last: np.ndarray,
                          escapes: np.ndarray, avoid_mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Counts and concatenated sorted successor lists for a batch of index ranges."""
    spans = np.clip(last - first + 1, 0, None)
    max_span = spans.max(axis=0)
    offsets = np.array(list(itertools.product(*[range(m) for m in max_span])), dtype=np.int64)
    offsets = offsets.reshape(-1, grid.dim)
    idx = first[:, None, :] + offsets[None, :, :]
    valid = np.all(offsets[None, :, :] < spans[:, None, :], axis=-1)
    flat = np.where(valid, np.clip(idx, 0, grid.cells_per_dim - 1) @ grid._strides, 0)
    hits_avoid = valid & avoid_mask[flat]
    keep = valid & ~hits_avoid
    to_out = escapes | np.any(hits_avoid, axis=1)
    flat = np.concatenate([flat, np.full((flat.shape[0], 1), grid.out, dtype=np.int64)], axis=1)
    keep = np.concatenate([keep, to_out[:, None]], axis=1)
    return keep.sum(axis=1), flat[keep]


def _successor_batch(grid: PartitionGrid, lo: np.ndarray, hi: np.ndarray,
                     avoid_mask: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    first, last, escapes = grid.index_ranges(lo, hi)
    spans = np.clip(last - first + 1, 0, None)
    cap = max(1, int(4096 ** (1.0 / grid.dim)))
    small = np.all(spans <= cap, axis=1)
    if np.all(small):
        counts, flat = _enumerate_successors(grid, first, last, escapes, avoid_mask)
        return counts, [flat]
    # rare wide reach boxes are enumerated one at a time
    counts = np.zeros(len(lo), dtype=np.int64)
    pieces: List[Optional[np.ndarray]] = [None] * len(lo)
    rows = np.flatnonzero(small)
    if rows.size:
        c, flat = _enumerate_successors(grid, first[rows], last[rows], escapes[rows], avoid_mask)
        for row, part in zip(rows, np.split(flat, np.cumsum(c)[:-1])):
            pieces[row] = part
        counts[rows] = c
    for row in np.flatnonzero(~small):
        c, flat = _enumerate_successors(grid, first[row:row + 1], last[row:row + 1], escapes[row:row + 1], avoid_mask)
        pieces[row] = flat
        counts[row] = c[0]
    return counts, pieces


def _build_shard(d: DecompositionFunction,
                 grid: PartitionGrid,
                 inputs: InputGrid,
                 W: Optional[Box],
                 settings: ReachSettings,
                 avoid_mask: np.ndarray,
                 forbidden: np.ndarray,
                 cells: np.ndarray):
    K = len(inputs)
    n = grid.dim
    p = d.field.dim_w
    w_lo = W.lo if W is not None and p else np.zeros(p)
    w_hi = W.hi if W is not None and p else np.zeros(p)
    pair_cells = np.repeat(cells, K)
    pair_inputs = np.tile(np.arange(K), cells.size)
    active = ~avoid_mask[pair_cells] & ~forbidden[pair_cells, pair_inputs]

    reach_lo = np.full((pair_cells.size, n), np.nan)
    reach_hi = np.full((pair_cells.size, n), np.nan)
    # inactive pairs go straight to Out
    counts = np.ones(pair_cells.size, dtype=np.int64)
    row_lists = [np.array([grid.out], dtype=np.int64)] * pair_cells.size

    rows = np.flatnonzero(active)
    for start in range(0, rows.size, PAIR_CHUNK):
        chunk = rows[start:start + PAIR_CHUNK]
        lo, hi = grid.cell_boxes(pair_cells[chunk])
        labels = list(zip(pair_cells[chunk].tolist(), pair_inputs[chunk].tolist()))
        r_lo, r_hi = embed_integrate_batch(d, lo, hi, inputs.points[pair_inputs[chunk]], w_lo, w_hi, settings, labels)
        reach_lo[chunk] = r_lo
        reach_hi[chunk] = r_hi
        c, parts = _successor_batch(grid, r_lo, r_hi, avoid_mask)
        counts[chunk] = c
        if len(parts) == 1:
            parts = np.split(parts[0], np.cumsum(c)[:-1])
        for row, part in zip(chunk, parts):
            row_lists[row] = part

    pieces = np.concatenate(row_lists) if row_lists else np.zeros(0, dtype=np.int64)
    return counts, pieces, reach_lo, reach_hi


def build_abstraction(field: VectorField,
                      d: DecompositionFunction,
                      grid: PartitionGrid,
                      inputs: InputGrid,
                      W: Optional[Box],
                      settings: ReachSettings,
                      avoid_cells,
                      forbidden: Optional[np.ndarray] = None,
                      threads: int = 1,
                      config_digest: str = "") -> TransitionSystem:
    """
    Build the transition system of the sampled abstraction.

    `avoid_cells` is a boolean mask over cells or a predicate on a cell
    index. Avoid cells are merged into Out: their only successor is Out,
    and a reach box meeting one sends the pair to Out as well.
    """
    started = time.time()
    N = grid.total_cells
    K = len(inputs)
    if field.dim_x != grid.dim or field.dim_u != inputs.dim:
        raise ValueError(f"{field} does not match a {grid.dim}-d grid with {inputs.dim}-d inputs")
    if callable(avoid_cells):
        avoid_mask = np.array([bool(avoid_cells(i)) for i in range(N)], dtype=bool)
    else:
        avoid_mask = np.asarray(avoid_cells, dtype=bool)
    if avoid_mask.shape != (N,):
        raise ValueError(f"avoid mask has shape {avoid_mask.shape}, expected ({N},)")
    if forbidden is None:
        forbidden = np.zeros((N, K), dtype=bool)
    # Out absorbs lookups from index_ranges clipping
    avoid_lookup = np.concatenate([avoid_mask, [False]])

    shards = [np.arange(i, min(i + SHARD_CELLS, N)) for i in range(0, N, SHARD_CELLS)]
    logger.info(f"building abstraction: {N} cells x {K} inputs in {len(shards)} shards on {threads} threads")
    results = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_build_shard)(d, grid, inputs, W, settings, avoid_lookup, forbidden, cells) for cells in shards
    )

    counts = np.concatenate([r[0] for r in results]) if results else np.zeros(0, dtype=np.int64)
    succ = np.concatenate([r[1] for r in results]) if results else np.zeros(0, dtype=np.int64)
    reach_lo = np.concatenate([r[2] for r in results]) if results else np.zeros((0, grid.dim))
    reach_hi = np.concatenate([r[3] for r in results]) if results else np.zeros((0, grid.dim))
    offsets = np.zeros(N * K + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    stats = {
        "cells": N,
        "inputs": K,
        "pairs": N * K,
        "avoid_cells": int(avoid_mask.sum()),
        "forbidden_pairs": int(forbidden.sum()),
        "transitions": int(succ.size),
    }
    elapsed = time.time() - started
    logger.info(f"abstraction built: {stats['transitions']} transitions in {elapsed:.1f}s")
    ts = TransitionSystem(grid, inputs, offsets, succ.astype(np.int32), ~avoid_mask, reach_lo, reach_hi,
                          stats, config_digest)
    ts.wall_time = elapsed
    return ts
