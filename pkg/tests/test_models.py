import unittest

import numpy as np
from numpy.testing import assert_allclose

from reachsynth.errors import ConfigError
from reachsynth.intervals import IntervalArray
from reachsynth.models import BUILTIN_MODELS, ModelBundle, double_integrator, resolve_model


class TestDoubleIntegrator(unittest.TestCase):
    def setUp(self):
        self.bundle = double_integrator({"dim": 2})
        self.rng = np.random.default_rng(4)

    def test_dimensions(self):
        es = self.bundle.error_system
        self.assertEqual((es.n_x, es.n_u, es.nhat_x, es.nhat_u, es.n_w, es.nhat_w), (4, 2, 2, 2, 2, 2))
        self.assertEqual(self.bundle.concrete.dim_x, 4)
        self.assertEqual(self.bundle.abstract.dim_x, 2)
        assert_allclose(self.bundle.pi.apply([1.0, 2.0], [0.1, 0.2]), [1.0, 2.0, 0.1, 0.2])

    def test_vector_fields(self):
        dx = self.bundle.concrete.eval(np.array([0.0, 0.0, 1.0, -1.0]), np.array([0.5, 0.0]), np.array([0.1, 0.1]))
        assert_allclose(dx, [1.0, -1.0, 0.6, 0.1])
        dxhat = self.bundle.abstract.eval(np.array([3.0, 3.0]), np.array([0.2, 0.0]), np.array([0.0, 0.05]))
        assert_allclose(dxhat, [0.2, 0.05])

    def test_jacobian(self):
        box = IntervalArray(np.zeros((5, 2)), np.ones((5, 2)))
        jx, jw = self.bundle.abstract.jacobian(box, np.zeros((5, 2)), IntervalArray(np.zeros((5, 2))))
        assert_allclose(jx.hi, np.zeros((5, 2, 2)))
        assert_allclose(jw.lo, np.broadcast_to(np.eye(2), (5, 2, 2)))

    def test_error_dynamics_match_difference(self):
        es = self.bundle.error_system
        xhat = self.rng.uniform(-1, 1, size=(30, 2))
        uhat = self.rng.uniform(-1, 1, size=(30, 2))
        w = self.rng.uniform(-0.1, 0.1, size=(30, 2))
        what = self.rng.uniform(-0.1, 0.1, size=(30, 2))
        x = self.rng.uniform(-1, 1, size=(30, 4))
        u = self.rng.uniform(-1, 1, size=(30, 2))
        e = es.error_state(x, xhat, uhat)
        expected = self.bundle.concrete.eval(x, u, w) - np.hstack([self.bundle.abstract.eval(xhat, uhat, what),
                                                                  np.zeros((30, 2))])
        model = es.f_e(e, xhat, uhat, w, what) + u @ es.g_e(e, xhat, uhat, w).T
        assert_allclose(model, expected, atol=1e-12)

    def test_rejects_zero_axes(self):
        with self.assertRaises(ConfigError):
            double_integrator({"dim": 0})


class TestResolveModel(unittest.TestCase):
    def test_builtins(self):
        self.assertEqual(sorted(BUILTIN_MODELS), ["double_integrator", "ship"])
        bundle = resolve_model("ship")
        self.assertEqual(bundle.error_system.n_x, 6)
        self.assertEqual(bundle.abstract.dim_x, 3)

    def test_ship_params_override(self):
        bundle = resolve_model("ship", {"D": np.diag([1.0, 2.0, 3.0]).tolist()})
        dx = bundle.concrete.eval(np.array([0, 0, 0, 1.0, 0, 0]), np.zeros(3), np.zeros(6))
        assert_allclose(dx[3], -1.0 / 87.4)

    def test_plugin(self):
        bundle = resolve_model("reachsynth.models:double_integrator", {"dim": 1})
        self.assertIsInstance(bundle, ModelBundle)
        self.assertEqual(bundle.error_system.n_x, 2)

    def test_bad_specs(self):
        with self.assertRaises(ConfigError):
            resolve_model("submarine")
        with self.assertRaises(ConfigError):
            resolve_model("reachsynth.models:no_such_factory")
        with self.assertRaises(ConfigError):
            resolve_model("no_such_package.models:factory")
        with self.assertRaises(ConfigError):
            resolve_model("numpy:asarray")


if __name__ == '__main__':
    unittest.main()
