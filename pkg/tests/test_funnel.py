import unittest

import numpy as np
from numpy.testing import assert_allclose

from reachsynth.errors import CertificationError, UnboundedLevelSetError, UncontrollableError
from reachsynth.funnel import (FALSIFIED, INCONCLUSIVE, VERIFIED, CheckSettings, ErrorSystem, FunnelCertificate,
                               check_decrease, check_initial_containment, check_jump, combine_verdicts,
                               compute_epsilon, error_state, linearize, lyap_candidate, stabilizing_gain)
from reachsynth.interval_core import Box
from reachsynth.models import double_integrator
from reachsynth.polynomial import PolynomialMap


def scalar_system(a, nhat_u=0, jump=None):
    """de/dt = a e + u with no abstract state or disturbances."""
    def f_e(e, xhat, uhat, w, what):
        return a * e

    def g_e(e, xhat, uhat, w):
        return np.array([[1.0]])

    jump_matrix = None if jump is None else np.array([[jump]])
    return ErrorSystem(1, 1, 0, nhat_u, 0, 0, f_e, g_e, jump_matrix=jump_matrix, name="scalar")


def certificate(es, Q, gamma, E0=None, domains=None, T_s=1.0):
    V = PolynomialMap.quadratic_form(es.layout, "e", np.atleast_2d(Q))
    kappa = PolynomialMap.zero(es.layout, es.n_u)
    E0 = E0 or Box(np.zeros(es.n_x), np.zeros(es.n_x))
    return FunnelCertificate(V, kappa, gamma, T_s, E0, domains or {})


class TestVerdicts(unittest.TestCase):
    def test_combination_order(self):
        self.assertEqual(combine_verdicts([VERIFIED, INCONCLUSIVE, FALSIFIED]), FALSIFIED)
        self.assertEqual(combine_verdicts([VERIFIED, INCONCLUSIVE]), INCONCLUSIVE)
        self.assertEqual(combine_verdicts([VERIFIED, VERIFIED]), VERIFIED)

    def test_certificate_validation(self):
        es = scalar_system(-1.0)
        with self.assertRaises(ValueError):
            certificate(es, [[1.0]], 0.0)
        with self.assertRaises(ValueError):
            certificate(es, [[1.0]], 1.0, T_s=0.0)
        with self.assertRaises(ValueError):
            certificate(es, [[1.0]], 1.0, domains={"z": None})


class TestErrorState(unittest.TestCase):
    def test_zero_on_the_abstraction(self):
        es = double_integrator({"dim": 1}).error_system
        assert_allclose(error_state(np.array([3.0, 0.5]), np.array([3.0]), np.array([0.5]), es), [0.0, 0.0])

    def test_difference_without_transform(self):
        es = double_integrator({"dim": 1}).error_system
        assert_allclose(es.error_state([3.5, 0.0], [3.0], [0.5]), [0.5, -0.5])
        assert_allclose(es.concrete_state([0.5, -0.5], [3.0], [0.5]), [3.5, 0.0])


class TestInitialContainment(unittest.TestCase):
    def test_unit_ball_corners(self):
        for n in (1, 2, 3, 4):
            es = ErrorSystem(n, 1, 0, 0, 0, 0, lambda e, *args: -1.0 * e, lambda *args: np.ones((n, 1)))
            cert = certificate(es, np.eye(n), 1.0, E0=Box(np.full(n, -0.5), np.full(n, 0.5)))
            self.assertEqual(check_initial_containment(cert).status, VERIFIED)

    def test_too_small_level(self):
        es = scalar_system(-1.0)
        cert = certificate(es, [[1.0]], 0.1, E0=Box([-1.0], [1.0]))
        verdict = check_initial_containment(cert)
        self.assertEqual(verdict.status, FALSIFIED)
        assert_allclose(np.abs(verdict.witness["e"]), [1.0])
        assert_allclose(verdict.value, 1.0)

    def test_general_polynomial_uses_bisection(self):
        es = scalar_system(-1.0)
        e = PolynomialMap.variable(es.layout, "e")
        V = e * e * e * e
        cert = FunnelCertificate(V, PolynomialMap.zero(es.layout, 1), 1.0, 1.0, Box([-0.9], [0.9]), {})
        verdict = check_initial_containment(cert)
        self.assertEqual(verdict.status, VERIFIED)
        self.assertEqual(verdict.stats["method"], "bisection")


class TestDecrease(unittest.TestCase):
    def setUp(self):
        self.settings = CheckSettings(samples=512)

    def test_stable_scalar(self):
        es = scalar_system(-1.0)
        verdict = check_decrease(certificate(es, [[1.0]], 1.0), es, settings=self.settings)
        self.assertEqual(verdict.status, VERIFIED)
        assert_allclose(verdict.stats["max_vdot"], -2.0)

    def test_unstable_scalar(self):
        es = scalar_system(1.0)
        cert = certificate(es, [[1.0]], 1.0)
        verdict = check_decrease(cert, es, settings=self.settings)
        self.assertEqual(verdict.status, FALSIFIED)
        assert_allclose(np.abs(verdict.witness["e"]), [1.0], rtol=1e-9)
        assert_allclose(verdict.value, 2.0, rtol=1e-9)
        # the witness re-evaluates positive
        values = {k: np.asarray(v)[None] for k, v in verdict.witness.items()}
        self.assertGreater(float(cert.vdot(es, values)[0]), 0.0)

    def test_tolerance(self):
        es = scalar_system(-1.0)
        verdict = check_decrease(certificate(es, [[1.0]], 1.0), es, tolerance=3.0, settings=self.settings)
        self.assertEqual(verdict.status, FALSIFIED)

    def test_falsify_only(self):
        es = scalar_system(-1.0)
        verdict = check_decrease(certificate(es, [[1.0]], 1.0), es, settings=self.settings, falsify_only=True)
        self.assertEqual(verdict.status, INCONCLUSIVE)


class TestJump(unittest.TestCase):
    def test_shift_beyond_level(self):
        es = scalar_system(-1.0, nhat_u=1, jump=1.0)
        cert = certificate(es, [[1.0]], 1.0, domains={"duhat": Box([-0.5], [0.5])})
        verdict = check_jump(cert, es)
        self.assertEqual(verdict.status, FALSIFIED)
        assert_allclose(verdict.value, 2.25)

    def test_no_jump_effect(self):
        es = scalar_system(-1.0, nhat_u=1, jump=0.0)
        cert = certificate(es, [[1.0]], 1.0, domains={"duhat": Box([-0.5], [0.5])})
        self.assertEqual(check_jump(cert, es).status, VERIFIED)

    def test_shrinking_funnel_absorbs_jump(self):
        es = scalar_system(-1.0, nhat_u=1, jump=1.0)
        e = PolynomialMap.variable(es.layout, "e")
        t = PolynomialMap.variable(es.layout, "t")
        # radius 2 at t = 0, 1 at t = 1
        V = e * e * (1.0 + 3.0 * t)
        cert = FunnelCertificate(V, PolynomialMap.zero(es.layout, 1), 4.0, 1.0, Box([0.0], [0.0]),
                                 {"duhat": Box([-0.5], [0.5])})
        self.assertEqual(check_jump(cert, es).status, VERIFIED)


class TestEpsilon(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)

    def test_unit_ball(self):
        es = ErrorSystem(3, 1, 0, 0, 0, 0, lambda e, *args: -1.0 * e, lambda *args: np.ones((3, 1)))
        assert_allclose(compute_epsilon(certificate(es, np.eye(3), 1.0)), np.ones(3))

    def test_ellipse_semi_axes(self):
        es = ErrorSystem(2, 1, 0, 0, 0, 0, lambda e, *args: -1.0 * e, lambda *args: np.ones((2, 1)))
        assert_allclose(compute_epsilon(certificate(es, np.diag([4.0, 1.0]), 1.0)), [0.5, 1.0], rtol=1e-9)

    def test_correlated_quadratic(self):
        es = ErrorSystem(2, 1, 0, 0, 0, 0, lambda e, *args: -1.0 * e, lambda *args: np.ones((2, 1)))
        Q = np.array([[2.0, 0.8], [0.8, 1.0]])
        eps = compute_epsilon(certificate(es, Q, 0.5))
        assert_allclose(eps, np.sqrt(0.5 * np.diag(np.linalg.inv(Q))), rtol=1e-9)

    def test_unbounded_level_set(self):
        es = ErrorSystem(2, 1, 0, 0, 0, 0, lambda e, *args: -1.0 * e, lambda *args: np.ones((2, 1)))
        with self.assertRaises(UnboundedLevelSetError):
            compute_epsilon(certificate(es, np.diag([1.0, 0.0]), 1.0))

    def test_general_polynomial_is_conservative(self):
        es = ErrorSystem(2, 1, 0, 0, 0, 0, lambda e, *args: -1.0 * e, lambda *args: np.ones((2, 1)))
        e0 = PolynomialMap.variable(es.layout, "e", 0)
        e1 = PolynomialMap.variable(es.layout, "e", 1)
        V = e0 * e0 * e0 * e0 + e1 * e1
        cert = FunnelCertificate(V, PolynomialMap.zero(es.layout, 1), 1.0, 1.0, Box([0.0, 0.0], [0.0, 0.0]), {})
        eps = compute_epsilon(cert)
        self.assertTrue(np.all(eps >= 1.0))
        self.assertTrue(np.all(eps <= 1.1))
        points = self.rng.uniform(-1.5, 1.5, size=(10000, 2))
        inside = points[cert.value(np.zeros(len(points)), points) <= 1.0]
        self.assertTrue(np.all(np.abs(inside) <= eps))

    def test_time_varying_quadratic(self):
        es = ErrorSystem(2, 1, 0, 0, 0, 0, lambda e, *args: -1.0 * e, lambda *args: np.ones((2, 1)))
        t = PolynomialMap.variable(es.layout, "t")
        V = PolynomialMap.quadratic_form(es.layout, "e", np.eye(2)) * (1.0 + t)
        cert = FunnelCertificate(V, PolynomialMap.zero(es.layout, 1), 1.0, 2.0, Box([0.0, 0.0], [0.0, 0.0]), {})
        # the widest sublevel set is at t = 0
        assert_allclose(compute_epsilon(cert), [1.0, 1.0], rtol=1e-9)
        samples_t = self.rng.uniform(0.0, 2.0, size=10000)
        points = self.rng.uniform(-1.2, 1.2, size=(10000, 2))
        inside = points[cert.value(samples_t, points) <= 1.0]
        self.assertTrue(np.all(np.abs(inside) <= 1.0 + 1e-12))


class TestCandidate(unittest.TestCase):
    def setUp(self):
        self.es = double_integrator({"dim": 1}).error_system
        self.domains = {
            "xhat": Box([0.0], [20.0]),
            "uhat": Box([-0.4], [0.4]),
            "duhat": Box([-0.1], [0.1]),
            "w": Box([0.0], [0.0]),
            "what": Box([0.0], [0.0]),
        }
        self.settings = CheckSettings(samples=256)

    def test_linearization(self):
        A, B = linearize(self.es, [10.0], [0.0])
        assert_allclose(A, [[0.0, 1.0], [0.0, 0.0]], atol=1e-8)
        assert_allclose(B, [[0.0], [1.0]])

    def test_lqr_gain_matches_riccati(self):
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        B = np.array([[0.0], [1.0]])
        K, P, _ = stabilizing_gain(A, B, np.eye(2), np.eye(1))
        assert_allclose(K, [[-1.0, -np.sqrt(3.0)]], rtol=1e-8)
        assert_allclose(P, [[np.sqrt(3.0), 1.0], [1.0, np.sqrt(3.0)]], rtol=1e-8)

    def test_uncontrollable(self):
        A = np.array([[1.0, 0.0], [0.0, -1.0]])
        B = np.array([[0.0], [1.0]])
        with self.assertRaises(UncontrollableError):
            stabilizing_gain(A, B, np.eye(2), np.eye(1))

    def test_candidate_verifies(self):
        cert = lyap_candidate(self.es, ([10.0], [0.0]), [1.0, 1.0], [1.0], 1.0, self.domains, alpha="auto",
                              gamma_range=(0.5, 50.0), scan_points=3, bisection_steps=3, settings=self.settings)
        self.assertTrue(all(v < 0 for v in cert.meta["closed_loop_eigenvalues"]))
        self.assertEqual(cert.verdicts["decrease"], VERIFIED)
        self.assertEqual(cert.verdicts["jump"], VERIFIED)
        self.assertEqual(cert.verdicts["initial"], VERIFIED)
        assert_allclose(cert.meta["epsilon"], compute_epsilon(cert))
        self.assertGreater(cert.meta["alpha"], 0.0)
        # a small level cannot absorb the input jump
        self.assertEqual(check_jump(cert.with_gamma(0.01), self.es).status, FALSIFIED)

    def test_no_level_passes(self):
        with self.assertRaises(CertificationError):
            lyap_candidate(self.es, ([10.0], [0.0]), [1.0, 1.0], [1.0], 1.0, self.domains, alpha=0.0,
                           gamma_range=(0.5, 50.0), scan_points=3, settings=self.settings)

    def test_rejects_bad_preference(self):
        with self.assertRaises(ValueError):
            lyap_candidate(self.es, ([10.0], [0.0]), [1.0, 1.0], [1.0], 1.0, self.domains, prefer="middle")


if __name__ == '__main__':
    unittest.main()
