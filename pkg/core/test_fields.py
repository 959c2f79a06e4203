"""
Tests for bivector, 2-form and 1-form fields and the Jacobiator
"""

import numpy as np
from django.test import SimpleTestCase

from core.services.errors import NormalFormError, SingularGauge
from core.services.expressions import ChartBox
from core.services.fields import (
    BivectorField, OneFormField, TwoFormField, certify_closed, certify_poisson,
    exterior_derivative_numeric, gauge_bivector, gauge_matrices, jacobiator,
    jacobiator_numeric, jacobiator_residuals, one_form_differential, sharp
)


SO3 = {'1,2': 'x3', '2,3': 'x1', '3,1': 'x2'}


class AntisymmetricFieldTests(SimpleTestCase):
    """Test construction and evaluation of antisymmetric fields"""

    def setUp(self):
        self.box = ChartBox.cube('R3', 3, 1.5)

    def test_lower_slot_is_negated(self):
        """Test that a slot given below the diagonal is stored negated"""
        pi = BivectorField(self.box, SO3)
        matrix = pi.at([0.1, 0.2, 0.3])
        self.assertAlmostEqual(matrix[0, 2], -0.2)
        self.assertAlmostEqual(matrix[2, 0], 0.2)
        self.assertAlmostEqual(matrix[0, 1], 0.3)
        np.testing.assert_allclose(matrix, -matrix.T)

    def test_diagonal_slot_rejected(self):
        with self.assertRaises(NormalFormError):
            BivectorField(self.box, {'2,2': 'x1'})

    def test_slot_outside_dimension(self):
        with self.assertRaises(NormalFormError):
            BivectorField(self.box, {'1,4': '1'})

    def test_slot_given_twice(self):
        """Test that (i,j) and (j,i) together are refused"""
        with self.assertRaises(NormalFormError):
            BivectorField(self.box, {'1,2': 'x3', '2,1': 'x3'})

    def test_constant_round_trip(self):
        matrix = np.array([[0, 2, 0], [-2, 0, 1], [0, -1, 0]], dtype=float)
        field = TwoFormField.constant(self.box, matrix, 'B')
        np.testing.assert_allclose(field.at([0.3, -0.2, 1.0]), matrix)
        self.assertEqual(set(field.as_strings()), {'1,2', '2,3'})

    def test_constant_must_be_antisymmetric(self):
        with self.assertRaises(NormalFormError):
            TwoFormField.constant(self.box, np.eye(3))

    def test_jet_shapes(self):
        values, grads, hessians = BivectorField(self.box, SO3).jet(np.zeros((4, 3)), order=2)
        self.assertEqual(values.shape, (4, 3, 3))
        self.assertEqual(grads.shape, (4, 3, 3, 3))
        self.assertEqual(hessians.shape, (4, 3, 3, 3, 3))
        # ∂_3 π^{12} = 1
        self.assertEqual(grads[0, 0, 1, 2], 1.0)

    def test_negated(self):
        pi = BivectorField(self.box, SO3, 'so3')
        x = [0.4, -0.1, 0.7]
        np.testing.assert_allclose(pi.negated().at(x), -pi.at(x))

    def test_sharp(self):
        pi = BivectorField(self.box, SO3)
        np.testing.assert_allclose(sharp(pi, [0, 0, 1], [1, 0, 0]), [0, -1, 0])


class JacobiatorTests(SimpleTestCase):
    """Test the Jacobi identity residual"""

    def setUp(self):
        self.box = ChartBox.cube('R3', 3, 1.0)
        self.points = np.array([[0.1, 0.2, 0.3], [-0.5, 0.4, 0.9], [0.0, 0.0, 0.0]])

    def test_lie_poisson_is_poisson(self):
        """Test that the linear Poisson structure of so(3) has zero Jacobiator"""
        residuals = jacobiator_residuals(BivectorField(self.box, SO3), self.points)
        self.assertLess(float(np.max(residuals)), 1e-12)

    def test_non_poisson_field(self):
        """Test x2 ∂1∧∂2 + ∂2∧∂3, whose Jacobiator is constant"""
        pi = BivectorField(self.box, {'1,2': 'x2', '2,3': '1'})
        residuals = jacobiator_residuals(pi, self.points)
        np.testing.assert_allclose(residuals, 1.0)

    def test_any_bivector_in_dimension_two(self):
        pi = BivectorField(ChartBox.cube('R2', 2, 1.0), {'1,2': 'exp(x1)*sin(x2) + x1^3'})
        self.assertLess(float(np.max(np.abs(jacobiator(pi, [0.3, -0.4])))), 1e-12)

    def test_numeric_matches_exact(self):
        pi = BivectorField(self.box, {'1,2': 'x2', '2,3': '1'})
        x = np.array([0.2, 0.3, -0.1])
        np.testing.assert_allclose(
            jacobiator_numeric(pi.matrix, x, 1e-5, self.box), jacobiator(pi, x), atol=1e-7
        )

    def test_certify_poisson_flags_field(self):
        pi = BivectorField(self.box, SO3)
        self.assertLess(certify_poisson(pi, self.points), 1e-12)
        self.assertTrue(pi.poisson_certified)


class FormTests(SimpleTestCase):
    """Test exterior derivatives and gauge transforms"""

    def setUp(self):
        self.box = ChartBox.cube('R3', 3, 1.0)

    def test_one_form_differential(self):
        """Test d(x2 dx1) = -dx1∧dx2"""
        alpha = OneFormField(self.box, ['x2', '0', '0'])
        d_alpha = one_form_differential(alpha, [0.1, 0.2, 0.3])
        expected = np.zeros((3, 3))
        expected[0, 1], expected[1, 0] = -1.0, 1.0
        np.testing.assert_allclose(d_alpha, expected)

    def test_exact_form_is_closed(self):
        alpha = OneFormField(self.box, ['x2*x3', 'sin(x1)', 'x1^2*x2'])
        d_alpha = lambda points: alpha.differential(points)
        d_d = exterior_derivative_numeric(d_alpha, np.array([0.1, -0.2, 0.3]), 1e-5, self.box)
        self.assertLess(float(np.max(np.abs(d_d))), 1e-7)

    def test_certify_closed(self):
        b = TwoFormField(self.box, {'1,2': 'x3', '2,3': 'x1'})
        self.assertGreater(certify_closed(b, [[0.0, 0.0, 0.0]]), 0.5)
        self.assertFalse(b.closed)

    def test_stencil_must_stay_in_box(self):
        b = TwoFormField(self.box, {'1,2': 'x3'})
        with self.assertRaises(NormalFormError):
            exterior_derivative_numeric(b.matrix, np.array([1.0, 0.0, 0.0]), 1e-3, self.box)

    def test_gauge_of_symplectic_plane(self):
        """Test π^B = π(I + Bπ)^{-1} for the standard plane and B = b dx1∧dx2"""
        pi = np.array([[0.0, 1.0], [-1.0, 0.0]])
        b = np.array([[0.0, 0.5], [-0.5, 0.0]])
        # I + Bπ = (1 - 0.5) I
        np.testing.assert_allclose(gauge_matrices(pi, b), pi / 0.5)

    def test_gauge_singular(self):
        pi = np.array([[0.0, 1.0], [-1.0, 0.0]])
        b = np.array([[0.0, 1.0], [-1.0, 0.0]])
        with self.assertRaises(SingularGauge):
            gauge_matrices(pi, b)

    def test_gauge_bivector_field(self):
        box = ChartBox.cube('R2', 2, 1.0)
        pi = BivectorField(box, {'1,2': '1'})
        b = TwoFormField(box, {'1,2': 'x1'})
        x = [0.25, 0.0]
        np.testing.assert_allclose(gauge_bivector(pi, b, x)[0, 1], 1.0 / (1.0 - 0.25))
