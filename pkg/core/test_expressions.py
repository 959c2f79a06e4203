"""
Tests for the expression grammar, chart boxes and jet evaluation
"""

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from core.services.errors import (
    ExpressionSyntaxError, NormalFormError, OutOfDomain, UndefinedExpression
)
from core.services.expressions import (
    ChartBox, ExpressionField, eval_with_jet, max_variable, parse_expression
)


coordinate = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)


class ChartBoxTests(SimpleTestCase):
    """Test chart boxes and domain checks"""

    def setUp(self):
        self.box = ChartBox.cube('unit', 3, 1.0)

    def test_cube_bounds(self):
        """Test a cube has the requested center and half width"""
        self.assertEqual(self.box.dimension, 3)
        np.testing.assert_allclose(self.box.lower, [-1, -1, -1])
        np.testing.assert_allclose(self.box.upper, [1, 1, 1])
        np.testing.assert_allclose(self.box.center, [0, 0, 0])

    def test_empty_interval_rejected(self):
        """Test that an interval with lower > upper is refused"""
        with self.assertRaises(NormalFormError):
            ChartBox('bad', ((1.0, 0.0),))

    def test_contains_boundary(self):
        """Test that points on the boundary are inside"""
        mask = self.box.contains(np.array([[1.0, -1.0, 0.0], [1.5, 0.0, 0.0]]))
        self.assertEqual(mask.tolist(), [True, False])

    def test_require_reports_point(self):
        """Test that require names the offending point"""
        with self.assertRaises(OutOfDomain) as ctx:
            self.box.require([0.0, 2.0, 0.0])
        self.assertEqual(ctx.exception.point, [0.0, 2.0, 0.0])


class GrammarTests(SimpleTestCase):
    """Test parsing of expression strings"""

    def test_max_variable(self):
        self.assertEqual(max_variable(parse_expression('x1*x3 + sin(x2)')), 3)
        self.assertEqual(max_variable(parse_expression('2.5')), 0)

    def test_unknown_function(self):
        """Test that only the documented functions are accepted"""
        with self.assertRaises(ExpressionSyntaxError):
            parse_expression('tan(x1)')

    def test_fractional_exponent(self):
        """Test that exponents must be integer literals"""
        with self.assertRaises(ExpressionSyntaxError):
            parse_expression('x1^0.5')

    def test_trailing_garbage(self):
        with self.assertRaises(ExpressionSyntaxError):
            parse_expression('x1 + ')

    def test_variable_beyond_chart(self):
        """Test that a coordinate beyond the chart dimension is refused"""
        with self.assertRaises(ExpressionSyntaxError):
            ExpressionField('x4', ChartBox.cube('R3', 3, 1.0))

    def test_precedence(self):
        """Test that unary minus binds looser than power"""
        f = ExpressionField('-x1^2 + 2*x2', ChartBox.cube('R2', 2, 2.0))
        self.assertAlmostEqual(float(f.evaluate([1.5, 0.25])[0]), -2.25 + 0.5)

    def test_constant_expressions(self):
        box = ChartBox.cube('R2', 2, 1.0)
        self.assertTrue(ExpressionField('exp(1) * 2', box).is_constant)
        self.assertFalse(ExpressionField('x2 - x2', box).is_constant)


class JetTests(SimpleTestCase):
    """Test exact first and second derivatives"""

    def setUp(self):
        self.box = ChartBox.cube('R2', 2, 2.0)

    def test_polynomial_jet(self):
        """Test value, gradient and Hessian of x1^2*x2"""
        value, grad, hess = eval_with_jet(ExpressionField('x1^2*x2', self.box), [1.0, 2.0], order=2)
        self.assertAlmostEqual(value, 2.0)
        np.testing.assert_allclose(grad, [4.0, 1.0])
        np.testing.assert_allclose(hess, [[4.0, 2.0], [2.0, 0.0]])

    def test_affine_builder(self):
        f = ExpressionField.affine(1.0, [2.0, 0.0], self.box)
        value, grad = eval_with_jet(f, [0.5, 1.0])
        self.assertAlmostEqual(value, 2.0)
        np.testing.assert_allclose(grad, [2.0, 0.0])

    def test_division_by_zero(self):
        with self.assertRaises(UndefinedExpression):
            ExpressionField('1/x1', self.box).evaluate([0.0, 1.0])

    def test_sqrt_not_differentiable_at_zero(self):
        """Test that sqrt evaluates at zero but has no derivative there"""
        f = ExpressionField('sqrt(x1)', self.box)
        self.assertEqual(float(f.evaluate([0.0, 0.0])[0]), 0.0)
        with self.assertRaises(UndefinedExpression):
            eval_with_jet(f, [0.0, 0.0])

    def test_outside_chart(self):
        with self.assertRaises(OutOfDomain):
            ExpressionField('x1', self.box).evaluate([3.0, 0.0])

    @settings(max_examples=30, deadline=None)
    @given(coordinate, coordinate)
    def test_gradient_matches_differences(self, a, b):
        """
        Property: exact gradients agree with central differences
        """
        f = ExpressionField('sin(x1)*exp(x2) + x1*x2^3', self.box)
        _, grad = eval_with_jet(f, [a, b])
        h = 1e-6
        numeric = [
            (f.evaluate([a + h, b])[0] - f.evaluate([a - h, b])[0]) / (2 * h),
            (f.evaluate([a, b + h])[0] - f.evaluate([a, b - h])[0]) / (2 * h),
        ]
        np.testing.assert_allclose(grad, numeric, atol=1e-6)
