import unittest

import numpy as np
from numpy.testing import assert_allclose

from reachsynth.errors import IntegrationError
from reachsynth.interval_core import Box, box_contains
from reachsynth.intervals import IntervalArray
from reachsynth.reachability import (ReachSettings, VectorField, build_decomposition, embed_integrate,
                                     embed_integrate_batch, trajectory_endpoints)
from reachsynth.ship import kinematics_field


def zero_field(n=2):
    def jacobian(x, u, w):
        batch = x.shape[:-1]
        return IntervalArray(np.zeros(batch + (n, n))), IntervalArray(np.zeros(batch + (n, 0)))
    return VectorField(n, 1, 0, lambda x, u, w: 0.0 * x, jacobian=jacobian, name="zero")


def integrator_field():
    def jacobian(x, u, w):
        batch = x.shape[:-1]
        return IntervalArray(np.zeros(batch + (1, 1))), IntervalArray(np.ones(batch + (1, 1)))
    return VectorField(1, 1, 1, lambda x, u, w: u + w + 0.0 * x, jacobian=jacobian, name="integrator")


def linear_field(A):
    A = np.asarray(A, dtype=float)
    n = A.shape[0]

    def jacobian(x, u, w):
        batch = x.shape[:-1]
        return IntervalArray(np.broadcast_to(A, batch + (n, n))), IntervalArray(np.zeros(batch + (n, 0)))
    return VectorField(n, 1, 0, lambda x, u, w: x @ A.T, jacobian=jacobian, name="linear")


class TestReachSettings(unittest.TestCase):
    def test_rejects_bad_values(self):
        with self.assertRaises(ValueError):
            ReachSettings(horizon=0.0)
        with self.assertRaises(ValueError):
            ReachSettings(horizon=1.0, steps=0)
        with self.assertRaises(ValueError):
            ReachSettings(horizon=1.0, inflation=(-0.1,))

    def test_inflation_vector(self):
        assert_allclose(ReachSettings(1.0).inflation_vector(3), np.zeros(3))
        assert_allclose(ReachSettings(1.0, inflation=(0.1,)).inflation_vector(3), np.full(3, 0.1))
        with self.assertRaises(ValueError):
            ReachSettings(1.0, inflation=(0.1, 0.2)).inflation_vector(3)

    def test_missing_jacobian(self):
        with self.assertRaises(ValueError):
            build_decomposition(VectorField(1, 1, 0, lambda x, u, w: u))


class TestDecomposition(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_zero_field(self):
        d = build_decomposition(zero_field())
        assert_allclose(d.eval(np.zeros(2), np.ones(2), np.array([0.3])), np.zeros(2))

    def test_diagonal_matches_field_for_ship_kinematics(self):
        f = kinematics_field()
        d = build_decomposition(f)
        x = self.rng.uniform([0, 0, -np.pi], [10, 6.5, np.pi], size=(200, 3))
        u = self.rng.uniform([0, -0.05, -0.1], [0.18, 0.05, 0.1], size=(200, 3))
        w = self.rng.uniform(-0.01, 0.01, size=(200, 3))
        assert_allclose(d.eval(x, x, u, w, w), f.eval(x, u, w), atol=1e-12)

    def test_linear_routing(self):
        # x1' = x2, x2' = 0: the lower bound of x1' uses the lower x2
        d = build_decomposition(linear_field([[0.0, 1.0], [0.0, 0.0]]))
        lo = d.eval(np.array([0.0, -1.0]), np.array([1.0, 2.0]), np.zeros(1))
        hi = d.eval(np.array([1.0, 2.0]), np.array([0.0, -1.0]), np.zeros(1))
        assert_allclose(lo, [-1.0, 0.0])
        assert_allclose(hi, [2.0, 0.0])

    def test_negative_coupling_uses_dual(self):
        d = build_decomposition(linear_field([[0.0, -2.0], [0.0, 0.0]]))
        lo = d.eval(np.array([0.0, -1.0]), np.array([1.0, 2.0]), np.zeros(1))
        assert_allclose(lo, [-4.0, 0.0])

    def test_nan_jacobian(self):
        def jacobian(x, u, w):
            batch = x.shape[:-1]
            return IntervalArray(np.full(batch + (1, 1), np.nan)), IntervalArray(np.zeros(batch + (1, 0)))
        d = build_decomposition(VectorField(1, 1, 0, lambda x, u, w: u + 0.0 * x, jacobian=jacobian))
        with self.assertRaises(IntegrationError):
            d.eval(np.zeros(1), np.ones(1), np.zeros(1))


class TestEmbedIntegrate(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_stationary_box(self):
        d = build_decomposition(zero_field())
        box = Box([0.0, 0.0], [1.0, 1.0])
        result = embed_integrate(d, box, [0.5], None, ReachSettings(horizon=2.0))
        assert_allclose(result.lo, box.lo)
        assert_allclose(result.hi, box.hi)

    def test_translation(self):
        d = build_decomposition(integrator_field())
        result = embed_integrate(d, Box([0.0], [0.2]), [0.1], Box([0.0], [0.0]), ReachSettings(horizon=3.0))
        assert_allclose(result.lo, [0.3], atol=1e-12)
        assert_allclose(result.hi, [0.5], atol=1e-12)

    def test_disturbance_widens(self):
        d = build_decomposition(integrator_field())
        result = embed_integrate(d, Box([0.0], [0.2]), [0.1], Box([-0.01], [0.01]), ReachSettings(horizon=3.0))
        assert_allclose(result.lo, [0.27], atol=1e-12)
        assert_allclose(result.hi, [0.53], atol=1e-12)

    def test_inflation(self):
        d = build_decomposition(zero_field(1))
        result = embed_integrate(d, Box([0.0], [1.0]), [0.0], None, ReachSettings(horizon=1.0, inflation=(0.05,)))
        assert_allclose(result.lo, [-0.05])
        assert_allclose(result.hi, [1.05])

    def test_monotone_in_initial_box(self):
        d = build_decomposition(kinematics_field())
        s = ReachSettings(horizon=3.0)
        W = Box([-0.01] * 3, [0.01] * 3)
        inner = embed_integrate(d, Box([1.0, 1.0, 0.2], [1.1, 1.1, 0.3]), [0.1, 0.02, 0.05], W, s)
        outer = embed_integrate(d, Box([0.9, 0.9, 0.1], [1.2, 1.2, 0.4]), [0.1, 0.02, 0.05], W, s)
        self.assertTrue(box_contains(outer, inner))

    def test_ship_kinematics_contains_sampled_trajectories(self):
        f = kinematics_field()
        d = build_decomposition(f)
        cell = Box([0.0, 0.0, -np.pi], [0.2, 0.13, -np.pi + 0.1257])
        u = np.array([0.18, 0.0, 0.0])
        W = Box([-0.01] * 3, [0.01] * 3)
        reach = embed_integrate(d, cell, u, W, ReachSettings(horizon=3.0))

        x0 = self.rng.uniform(cell.lo, cell.hi, size=(1000, 3))
        w = self.rng.uniform(-0.01, 0.01, size=(1000, 10, 3))
        ends = trajectory_endpoints(f, x0, u, w, horizon=3.0)
        self.assertTrue(np.all(ends >= reach.lo - 1e-9))
        self.assertTrue(np.all(ends <= reach.hi + 1e-9))

    def test_blow_up_is_reported(self):
        def jacobian(x, u, w):
            return 2.0 * x[..., None], IntervalArray(np.zeros(x.shape + (0,)))
        d = build_decomposition(VectorField(1, 1, 0, lambda x, u, w: x * x + 0.0 * u, jacobian=jacobian))
        with self.assertRaises(IntegrationError):
            embed_integrate_batch(d, np.array([[1.0]]), np.array([[1.0]]), np.zeros(1), np.zeros(0), np.zeros(0),
                                  ReachSettings(horizon=3.0), labels=[(4, 2)])

    def test_batch_matches_single(self):
        d = build_decomposition(kinematics_field())
        s = ReachSettings(horizon=3.0, steps=20)
        lo = np.array([[1.0, 1.0, 0.2], [4.0, 2.0, -1.0]])
        hi = lo + 0.1
        u = np.array([[0.1, 0.0, 0.05], [0.0, 0.05, -0.1]])
        w_lo, w_hi = np.full(3, -0.01), np.full(3, 0.01)
        r_lo, r_hi = embed_integrate_batch(d, lo, hi, u, w_lo, w_hi, s)
        for row in range(2):
            single = embed_integrate(d, Box(lo[row], hi[row]), u[row], Box(w_lo, w_hi), s)
            assert_allclose(r_lo[row], single.lo, atol=1e-12)
            assert_allclose(r_hi[row], single.hi, atol=1e-12)


if __name__ == '__main__':
    unittest.main()
