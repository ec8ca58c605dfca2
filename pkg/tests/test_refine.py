import unittest

import numpy as np
from numpy.testing import assert_allclose

from reachsynth.abstraction import InputGrid
from reachsynth.errors import LeftWinningSetError
from reachsynth.funnel import FunnelCertificate
from reachsynth.games import LOSING, REACH, REACH_AVOID, STAY, ControllerTable
from reachsynth.interval_core import Box, PartitionGrid
from reachsynth.models import double_integrator
from reachsynth.polynomial import PolynomialMap
from reachsynth.refine import HierarchicalController, SampleLatch, composed_control, winning_initial_set, zoh_control


def make_controller(status=(REACH, REACH, STAY, LOSING), choice=(2, 2, 1, -1), mode="reach-avoid-stay"):
    es = double_integrator({"dim": 1}).error_system
    grid = PartitionGrid(Box([0.0], [4.0]), [4])
    inputs = InputGrid(Box([-1.0], [1.0]), [3])
    rank = [2, 1, 0, -1]
    table = ControllerTable(np.array(status), np.array(choice), np.array(rank), mode)
    V = PolynomialMap.quadratic_form(es.layout, "e", np.eye(2))
    kappa = PolynomialMap.linear_map(es.layout, "e", [[-1.0, -2.0]])
    cert = FunnelCertificate(V, kappa, 1.0, 1.0, Box([-0.1, -0.1], [0.1, 0.1]), {"duhat": Box([-0.5], [0.5])})
    return HierarchicalController(table, grid, inputs, cert, es)


class TestHierarchicalController(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ValueError):
            make_controller(choice=(2, -1, 1, -1))
        with self.assertRaises(ValueError):
            make_controller(choice=(2, 5, 1, -1))
        hc = make_controller()
        with self.assertRaises(ValueError):
            HierarchicalController(hc.table, PartitionGrid(Box([0.0], [4.0]), [5]), hc.inputs, hc.cert, hc.es)

    def test_reach_avoid_target_cells_need_no_input(self):
        hc = make_controller(choice=(2, 2, -1, -1), mode=REACH_AVOID)
        self.assertEqual(hc.table.mode, REACH_AVOID)

    def test_period_of(self):
        hc = make_controller()
        self.assertEqual(hc.period_of(0.0), 0)
        self.assertEqual(hc.period_of(2.5), 2)
        self.assertEqual(hc.period_of(3.0), 3)


class TestZeroOrderHold(unittest.TestCase):
    def setUp(self):
        self.hc = make_controller()

    def test_input_held_over_period(self):
        latch = SampleLatch()
        assert_allclose(zoh_control(self.hc, 0.0, np.array([0.5]), latch), [1.0])
        # the abstract state moved into another cell, but the period has not ended
        assert_allclose(zoh_control(self.hc, 0.5, np.array([2.5]), latch), [1.0])
        self.assertEqual(latch.period, 0)

    def test_jump_is_clamped(self):
        latch = SampleLatch()
        zoh_control(self.hc, 0.0, np.array([0.5]), latch)
        assert_allclose(zoh_control(self.hc, 1.0, np.array([2.5]), latch), [0.5])
        self.assertEqual(latch.clamped[0], 1)

    def test_losing_cell_raises(self):
        with self.assertRaises(LeftWinningSetError) as ctx:
            zoh_control(self.hc, 0.0, np.array([3.5]), SampleLatch())
        self.assertEqual(ctx.exception.cell, 3)
        with self.assertRaises(LeftWinningSetError):
            zoh_control(self.hc, 0.0, np.array([-1.0]), SampleLatch())

    def test_non_strict_latch_flags_runs(self):
        latch = SampleLatch(runs=2, strict=False)
        uhat = zoh_control(self.hc, 0.0, np.array([[0.5], [3.5]]), latch)
        assert_allclose(uhat[0], [1.0])
        self.assertEqual(latch.left.tolist(), [False, True])

    def test_reach_avoid_stops_in_target(self):
        hc = make_controller(choice=(2, 2, -1, -1), mode=REACH_AVOID)
        latch = SampleLatch()
        zoh_control(hc, 0.0, np.array([1.5]), latch)
        held = zoh_control(hc, 1.0, np.array([2.5]), latch)
        self.assertTrue(latch.reached[0])
        assert_allclose(held, [1.0])


class TestComposedControl(unittest.TestCase):
    def test_tracking_feedback(self):
        hc = make_controller()
        u = composed_control(hc, 0.25, np.array([0.6, 1.2]), np.array([0.5]), SampleLatch())
        # e = (0.1, 0.2) against pi(0.5, 1.0)
        assert_allclose(u, [-0.5])


class TestWinningInitialSet(unittest.TestCase):
    def setUp(self):
        self.initial = winning_initial_set(make_controller())

    def test_membership(self):
        assert_allclose(self.initial.witness([0.5, 1.05]), [0.5])
        self.assertIn([2.5, 0.05], self.initial)
        self.assertNotIn([0.5, 0.5], self.initial)
        self.assertNotIn([3.5, 0.0], self.initial)

    def test_describe(self):
        info = self.initial.describe()
        self.assertEqual(info["winning_cells"], 3)
        assert_allclose(info["bounding_box"]["lo"], [-0.1, -0.1])
        assert_allclose(info["bounding_box"]["hi"], [3.1, 1.1])

    def test_reach_avoid_target_cells_are_initial(self):
        hc = make_controller(choice=(2, 2, -1, -1), mode=REACH_AVOID)
        assert_allclose(hc.initial_input([0, 2]), [[1.0], [0.0]])
        initial = winning_initial_set(hc)
        self.assertEqual(initial.describe()["winning_cells"], 3)
        assert_allclose(initial.witness([2.5, 0.05]), [2.5])
        self.assertIn([2.5, 0.05], initial)
        self.assertNotIn([3.5, 0.0], initial)


if __name__ == '__main__':
    unittest.main()
