import itertools
import unittest

import numpy as np
from numpy.testing import assert_array_equal

from reachsynth.abstraction import InputGrid, TransitionSystem
from reachsynth.games import (LOSING, REACH, REACH_AVOID, REACH_AVOID_STAY, STAY, GameSpec, check_controller,
                              coverage, extract_controller, game_spec_from_sets, solve_reach, solve_reach_naive,
                              solve_safety, solve_safety_naive, synthesize)
from reachsynth.interval_core import Box, PartitionGrid


def make_ts(rows, num_cells, num_inputs, safe=None):
    """rows[s][u] is the successor list of (s, u); num_cells stands for Out."""
    grid = PartitionGrid(Box([0.0], [float(num_cells)]), [num_cells])
    inputs = InputGrid(Box([0.0], [float(max(num_inputs - 1, 0))]), [num_inputs])
    counts, flat = [], []
    for s in range(num_cells):
        for u in range(num_inputs):
            succ = sorted(set(rows[s][u]))
            counts.append(len(succ))
            flat.extend(succ)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    safe = np.ones(num_cells, dtype=bool) if safe is None else np.asarray(safe, dtype=bool)
    nan = np.full((num_cells * num_inputs, 1), np.nan)
    return TransitionSystem(grid, inputs, offsets, np.array(flat, dtype=np.int64), safe, nan, nan)


def random_ts(rng, num_cells, num_inputs):
    out = num_cells
    safe = rng.random(num_cells) > 0.15
    rows = []
    for s in range(num_cells):
        row = []
        for u in range(num_inputs):
            if not safe[s]:
                row.append([out])
                continue
            k = min(int(rng.integers(1, 4)), num_cells + 1)
            row.append(rng.choice(num_cells + 1, size=k, replace=False).tolist())
        rows.append(row)
    return make_ts(rows, num_cells, num_inputs, safe)


def invariant_by_subsets(ts, spec):
    """Union of every controlled-invariant subset of the target."""
    target = np.flatnonzero(spec.target & ts.safe_mask).tolist()
    best = set()
    for r in range(1, len(target) + 1):
        for subset in itertools.combinations(target, r):
            members = set(subset)
            if all(any(set(ts.successors_of(s, int(u)).tolist()) <= members for u in spec.stay_inputs)
                   for s in members):
                best |= members
    return best


class TestSmallGames(unittest.TestCase):
    def setUp(self):
        # a=0, b=1, c=2, Out=3
        self.ts = make_ts([[[0]], [[0, 2]], [[3]]], 3, 1)

    def test_safety_removes_unsafe_successor(self):
        spec = GameSpec([0, 1], [0], [0], 3)
        result = solve_safety(self.ts, spec)
        assert_array_equal(result.stay, [True, False, False])
        self.assertEqual(result.choice[0], 0)
        self.assertEqual(result.choice[1], -1)

    def test_self_loops_are_invariant(self):
        ts = make_ts([[[0]], [[1]], [[2]]], 3, 1)
        result = solve_safety(ts, GameSpec([0, 1, 2], [0], [0], 3))
        self.assertTrue(result.stay.all())
        self.assertEqual(result.iterations, 1)

    def test_empty_target(self):
        spec = GameSpec([], [0], [0], 3)
        table = synthesize(self.ts, spec)
        self.assertFalse(table.win_set.any())
        self.assertEqual(coverage(table), 0.0)

    def test_chain_ranks(self):
        # a -> b -> c, c stays
        ts = make_ts([[[1]], [[2]], [[2]]], 3, 1)
        table = synthesize(ts, GameSpec([2], [0], [0], 3))
        assert_array_equal(table.rank, [2, 1, 0])
        assert_array_equal(table.status, [REACH, REACH, STAY])
        assert_array_equal(table.choice, [0, 0, 0])
        self.assertEqual(check_controller(ts, table), [])

    def test_cell_leading_only_to_out_loses(self):
        ts = make_ts([[[3], [3]], [[2]] * 2, [[2]] * 2], 3, 2)
        table = synthesize(ts, GameSpec([2], [0, 1], [0, 1], 3))
        self.assertEqual(table.status[0], LOSING)
        self.assertEqual(table.choice[0], -1)
        self.assertEqual(table.rank[0], -1)

    def test_empty_stay_set_gives_empty_reach(self):
        reach = solve_reach(self.ts, np.zeros(3, dtype=bool), [0])
        self.assertFalse(reach.win.any())

    def test_smallest_witness_wins(self):
        rows = [[[1] if u not in (3, 7) else [0] for u in range(8)], [[1]] * 8]
        ts = make_ts(rows, 2, 8)
        table = synthesize(ts, GameSpec([0], list(range(8)), list(range(8)), 2))
        self.assertEqual(table.choice[0], 3)

    def test_stay_inputs_restrict_safety_only(self):
        # input 1 keeps a inside the target but is not a stay input
        ts = make_ts([[[3], [0]], [[0], [0]], [[1], [1]]], 3, 2)
        table = synthesize(ts, GameSpec([0], [0], [0, 1], 3))
        self.assertFalse(table.stay_set.any())

    def test_reach_avoid_skips_safety(self):
        ts = make_ts([[[3]], [[0]], [[1]]], 3, 1)
        table = synthesize(ts, GameSpec([0], [0], [0], 3, mode=REACH_AVOID))
        assert_array_equal(table.status, [STAY, REACH, REACH])
        assert_array_equal(table.rank, [0, 1, 2])
        self.assertEqual(table.choice[0], -1)
        self.assertEqual(table.mode, REACH_AVOID)
        self.assertEqual(check_controller(ts, table), [])

    def test_unsafe_cells_never_win(self):
        ts = make_ts([[[0]], [[0]], [[3]]], 3, 1, safe=[True, True, False])
        table = synthesize(ts, GameSpec([0, 2], [0], [0], 3))
        assert_array_equal(table.status, [STAY, REACH, LOSING])

    def test_spec_validation(self):
        with self.assertRaises(ValueError):
            GameSpec([3], [0], [0], 3)
        with self.assertRaises(ValueError):
            GameSpec([0], [1], [0], 3)
        with self.assertRaises(ValueError):
            GameSpec([0], [0], [0], 3, mode="reach")

    def test_check_controller_flags_tampering(self):
        ts = make_ts([[[1]], [[2]], [[2]]], 3, 1)
        good = synthesize(ts, GameSpec([2], [0], [0], 3))
        rebuilt = extract_controller(solve_safety(ts, GameSpec([2], [0], [0], 3)),
                                     solve_reach(ts, np.array([False, False, True]), [0]))
        self.assertEqual(check_controller(ts, rebuilt), [])
        tampered = type(good)(good.status, good.choice, np.array([1, 1, 0]), good.mode)
        self.assertEqual(len(check_controller(ts, tampered)), 1)

    def test_stats(self):
        ts = make_ts([[[1]], [[2]], [[2]]], 3, 1)
        table = synthesize(ts, GameSpec([2], [0], [0], 3))
        self.assertEqual(table.stats["stay_cells"], 1)
        self.assertEqual(table.stats["win_cells"], 3)
        self.assertEqual(table.stats["reach_levels"], 2)
        self.assertAlmostEqual(table.stats["coverage"], 1.0)


class TestGameSpecFromSets(unittest.TestCase):
    def test_target_and_stay_inputs(self):
        ts = make_ts([[[0], [1], [2]] for _ in range(4)], 4, 3)
        spec = game_spec_from_sets(ts, Box([1.0], [3.5]), Box([0.5], [2.0]))
        assert_array_equal(spec.target_cells, [1, 2])
        assert_array_equal(spec.stay_inputs, [1, 2])
        assert_array_equal(spec.all_inputs, [0, 1, 2])
        self.assertEqual(spec.mode, REACH_AVOID_STAY)


class TestAgainstReferenceSolvers(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2024)

    def test_random_instances_match_naive_solvers(self):
        for trial in range(200):
            num_cells = int(self.rng.integers(1, 13))
            num_inputs = int(self.rng.integers(1, 4))
            ts = random_ts(self.rng, num_cells, num_inputs)
            target = self.rng.random(num_cells) < 0.4
            stay_inputs = [u for u in range(num_inputs) if self.rng.random() < 0.7] or [0]
            for mode in (REACH_AVOID_STAY, REACH_AVOID):
                spec = GameSpec(target, stay_inputs, range(num_inputs), num_cells, mode)
                fast = solve_safety(ts, spec)
                slow = solve_safety_naive(ts, spec)
                assert_array_equal(fast.stay, slow.stay, err_msg=f"trial {trial} {mode}")
                assert_array_equal(fast.choice, slow.choice, err_msg=f"trial {trial} {mode}")
                fast_r = solve_reach(ts, fast.stay, spec.all_inputs)
                slow_r = solve_reach_naive(ts, slow.stay, spec.all_inputs)
                assert_array_equal(fast_r.win, slow_r.win, err_msg=f"trial {trial} {mode}")
                assert_array_equal(fast_r.rank, slow_r.rank, err_msg=f"trial {trial} {mode}")
                assert_array_equal(fast_r.choice, slow_r.choice, err_msg=f"trial {trial} {mode}")
                table = extract_controller(fast, fast_r, mode)
                self.assertEqual(check_controller(ts, table), [], msg=f"trial {trial} {mode}")

    def test_safety_is_maximal_invariant(self):
        for trial in range(100):
            num_cells = int(self.rng.integers(1, 9))
            num_inputs = int(self.rng.integers(1, 4))
            ts = random_ts(self.rng, num_cells, num_inputs)
            spec = GameSpec(self.rng.random(num_cells) < 0.6, range(num_inputs), range(num_inputs), num_cells)
            result = solve_safety(ts, spec)
            self.assertEqual(set(np.flatnonzero(result.stay).tolist()), invariant_by_subsets(ts, spec),
                             msg=f"trial {trial}")

    def test_sizes_are_monotone(self):
        for _ in range(50):
            ts = random_ts(self.rng, 12, 3)
            spec = GameSpec(self.rng.random(12) < 0.5, [0, 1, 2], [0, 1, 2], 12)
            safety = solve_safety(ts, spec)
            reach = solve_reach(ts, safety.stay, spec.all_inputs)
            self.assertTrue(all(a >= b for a, b in zip(safety.sizes, safety.sizes[1:])))
            self.assertTrue(all(a < b for a, b in zip(reach.sizes, reach.sizes[1:])))

    def test_adversarial_discrete_runs_reach_and_stay(self):
        ts = random_ts(self.rng, 12, 3)
        spec = GameSpec(np.ones(12, dtype=bool), [0, 1, 2], [0, 1, 2], 12)
        table = synthesize(ts, spec)
        start_cells = np.flatnonzero(table.win_set)
        for _ in range(1000 if start_cells.size else 0):
            s = int(self.rng.choice(start_cells))
            budget = int(table.rank[s])
            for step in range(budget + 20):
                self.assertTrue(table.winning(s))
                if step >= budget:
                    self.assertEqual(table.status[s], STAY)
                succ = ts.successors_of(s, table.input_for(s))
                self.assertNotIn(ts.out, succ.tolist())
                s = int(self.rng.choice(succ))


if __name__ == '__main__':
    unittest.main()
