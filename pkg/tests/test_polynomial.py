import unittest

import numpy as np
import sympy as sp
from numpy.testing import assert_allclose

from reachsynth.intervals import IntervalArray
from reachsynth.polynomial import PolynomialMap, VariableLayout, power_table


class TestVariableLayout(unittest.TestCase):
    def test_slices_follow_group_order(self):
        layout = VariableLayout(e=2, xhat=1, uhat=1)
        self.assertEqual(layout.size, 5)
        self.assertEqual(layout.index("t"), 0)
        self.assertEqual(layout.index("e", 1), 2)
        self.assertEqual(layout.index("uhat"), 4)

    def test_rejects_unknown_group(self):
        with self.assertRaises(ValueError):
            VariableLayout(z=1)
        with self.assertRaises(ValueError):
            VariableLayout(t=2)
        with self.assertRaises(IndexError):
            VariableLayout(e=2).index("e", 2)

    def test_equality(self):
        self.assertEqual(VariableLayout(e=2), VariableLayout(e=2, w=0))
        self.assertNotEqual(VariableLayout(e=2), VariableLayout(e=3))


class TestPolynomialMap(unittest.TestCase):
    def setUp(self):
        self.layout = VariableLayout(e=2, xhat=1)
        self.e0 = PolynomialMap.variable(self.layout, "e", 0)
        self.e1 = PolynomialMap.variable(self.layout, "e", 1)
        self.t = PolynomialMap.variable(self.layout, "t")
        self.rng = np.random.default_rng(5)

    def test_arithmetic(self):
        p = 3.0 * self.e0 * self.e1 - self.e0 + 2.0
        value = p.evaluate({"e": np.array([2.0, 5.0])})
        assert_allclose(value, [3.0 * 2 * 5 - 2 + 2])
        self.assertEqual(p.degree, 2)

    def test_like_terms_merge(self):
        p = self.e0 + self.e0 - 2.0 * self.e0
        self.assertEqual(p.num_terms, 0)
        assert_allclose(p.evaluate({"e": np.ones(2)}), [0.0])

    def test_quadratic_form(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        V = PolynomialMap.quadratic_form(self.layout, "e", Q)
        e = self.rng.normal(size=(20, 2))
        assert_allclose(V.evaluate({"e": e})[:, 0], np.einsum("bi,ij,bj->b", e, Q, e))

    def test_linear_map_with_offset(self):
        p = PolynomialMap.linear_map(self.layout, "e", [[1.0, 2.0], [0.0, -1.0]], offset=[1.0, 0.0])
        assert_allclose(p.evaluate({"e": np.array([1.0, 1.0])}), [4.0, -1.0])
        with self.assertRaises(ValueError):
            PolynomialMap.linear_map(self.layout, "e", [[1.0, 2.0, 3.0]])

    def test_stack_and_index(self):
        p = PolynomialMap.stack([self.e0, self.e1 * self.e1])
        self.assertEqual(p.output_dim, 2)
        assert_allclose(p[1].evaluate({"e": np.array([0.0, 3.0])}), [9.0])

    def test_matmul_and_dot(self):
        p = PolynomialMap.stack([self.e0, self.e1])
        assert_allclose(p.matmul([[0.0, 1.0], [1.0, 0.0]]).evaluate({"e": np.array([1.0, 2.0])}), [2.0, 1.0])
        assert_allclose(p.dot(p).evaluate({"e": np.array([3.0, 4.0])}), [25.0])

    def test_derivative_and_gradient(self):
        p = self.e0 * self.e0 * self.e1 + self.t * self.e1
        grad = p.gradient("e")
        value = grad.evaluate({"t": np.array(2.0), "e": np.array([3.0, 4.0])})
        assert_allclose(value, [2 * 3 * 4, 9 + 2])
        assert_allclose(p.derivative("t").evaluate({"e": np.array([3.0, 4.0])}), [4.0])
        with self.assertRaises(ValueError):
            PolynomialMap.stack([self.e0, self.e1]).gradient("e")

    def test_sympy_form(self):
        p = PolynomialMap.stack([2.5 * self.e0 * self.t, self.e1 - 7.25])
        t, e0, e1, xhat0 = self.layout.symbols
        self.assertEqual(str(e1), "e1")
        exprs = p.to_sympy()
        self.assertEqual(exprs.shape, (2, 1))
        self.assertEqual(float(exprs[0].subs({t: 2.0, e0: 3.0})), 15.0)
        again = PolynomialMap.from_sympy(self.layout, exprs)
        np.testing.assert_array_equal(again.exponents, p.exponents)
        np.testing.assert_array_equal(again.coefficients, p.coefficients)
        cubic = PolynomialMap.from_sympy(self.layout, [(e0 + xhat0) ** 3 - xhat0 ** 3])
        self.assertEqual(cubic.degree, 3)
        self.assertEqual(cubic.num_terms, 3)
        with self.assertRaises(ValueError):
            PolynomialMap.from_sympy(self.layout, [sp.Symbol("z") * e0])

    def test_derivative_matches_finite_differences(self):
        p = 0.5 * self.e0 * self.e0 * self.e1 - 2.0 * self.t * self.t * self.e0 + self.e1 * self.e1 * self.e1
        t = 0.7
        e = np.array([1.3, -0.4])
        h = 1e-6
        for group, i, shift in (("e", 0, [h, 0.0]), ("e", 1, [0.0, h])):
            numeric = (p.evaluate({"t": np.array(t), "e": e + shift})
                       - p.evaluate({"t": np.array(t), "e": e - shift})) / (2 * h)
            assert_allclose(p.derivative(group, i).evaluate({"t": np.array(t), "e": e}), numeric, rtol=1e-6)
        numeric = (p.evaluate({"t": np.array(t + h), "e": e}) - p.evaluate({"t": np.array(t - h), "e": e})) / (2 * h)
        assert_allclose(p.derivative("t").evaluate({"t": np.array(t), "e": e}), numeric, rtol=1e-6)

    def test_broadcast_product(self):
        scale = 1.0 + 0.5 * self.t
        vec = PolynomialMap.stack([self.e0, self.e1])
        prod = vec * scale
        self.assertEqual(prod.output_dim, 2)
        assert_allclose(prod.evaluate({"t": np.array(2.0), "e": np.array([3.0, 4.0])}), [6.0, 8.0])
        with self.assertRaises(ValueError):
            vec * PolynomialMap.stack([self.e0, self.e1, self.t])

    def test_substitute(self):
        p = (self.t * self.t + 1.0) * self.e0
        fixed = p.substitute("t", 0, 3.0)
        self.assertFalse(fixed.depends_on("t"))
        assert_allclose(fixed.evaluate({"e": np.array([2.0, 0.0])}), [20.0])

    def test_missing_group(self):
        with self.assertRaises(KeyError):
            (self.e0 * self.t).evaluate({"e": np.zeros(2)})

    def test_interval_evaluation_encloses_samples(self):
        p = self.e0 * self.e0 - 3.0 * self.e0 * self.e1 + self.t * self.e1
        box = {"t": IntervalArray(0.0, 2.0), "e": IntervalArray([-1.0, 0.5], [0.5, 2.0])}
        enclosure = p.evaluate(box)
        self.assertIsInstance(enclosure, IntervalArray)
        t = self.rng.uniform(0.0, 2.0, size=500)
        e = self.rng.uniform([-1.0, 0.5], [0.5, 2.0], size=(500, 2))
        values = p.evaluate({"t": t, "e": e})[:, 0]
        self.assertTrue(np.all(values >= enclosure.lo[0] - 1e-12))
        self.assertTrue(np.all(values <= enclosure.hi[0] + 1e-12))

    def test_even_powers_stay_non_negative(self):
        table = power_table(IntervalArray([-2.0], [1.0]), np.array([2]))
        assert_allclose(table.lo, [0.0])
        assert_allclose(table.hi, [4.0])

    def test_scaled_quadratic(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        V = PolynomialMap.quadratic_form(self.layout, "e", Q) * (1.0 + 0.5 * self.t)
        c, ref = V.scaled_quadratic()
        assert_allclose(np.polynomial.polynomial.polyval(2.0, c) * ref, 2.0 * Q)
        self.assertIsNone((V + self.e0).scaled_quadratic())

    def test_text_form(self):
        p = PolynomialMap.stack([0.1 * self.e0 * self.t, self.e1 - 7.25])
        again = PolynomialMap.from_lines(self.layout, p.to_lines())
        np.testing.assert_array_equal(again.exponents, p.exponents)
        np.testing.assert_array_equal(again.coefficients, p.coefficients)
        with self.assertRaises(ValueError):
            PolynomialMap.from_lines(self.layout, ["terms two"])

    def test_max_degree(self):
        with self.assertRaises(ValueError):
            PolynomialMap(self.layout, [[0, 3, 0, 0]], [1.0], max_degree=2)


if __name__ == '__main__':
    unittest.main()
