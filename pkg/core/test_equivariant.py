"""
Tests for group actions, the b-map and the equivariant splitting chart
"""

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from core.services.equivariant import (
    GroupAction, SymplecticPair, average_metric, average_one_form, b_map, check_b_map, darboux_basis,
    equivariant_trivialization, invariant_spray, invariant_transversal, linear_moser_sqrt, principal_sqrt,
    spray_equivariance, standard_bivector, trivial_cocycle, weinstein_split
)
from core.services.errors import GroupActionError, NotInvertible, SpectrumOnCut
from core.services.expressions import ChartBox
from core.services.fields import BivectorField
from core.services.sampling import SampleGenerator
from core.services.spray import CotangentChart, SprayField


SO3 = {'1,2': 'x3', '2,3': 'x1', '3,1': 'x2'}
QUARTER_TURN = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def z4(fixed_point=(0.0, 0.0, 1.0)):
    return GroupAction.finite([np.linalg.matrix_power(QUARTER_TURN, i) for i in range(4)], fixed_point, 'Z4')


class GroupActionTests(SimpleTestCase):
    """Test group validation and invariance"""

    def test_z4_is_closed(self):
        self.assertEqual(z4().order, 4)
        self.assertLess(z4().check_closure(), 1e-12)

    def test_missing_element(self):
        with self.assertRaises(GroupActionError):
            GroupAction.finite([np.eye(3), QUARTER_TURN], [0.0, 0.0, 0.0])

    def test_missing_identity(self):
        with self.assertRaises(GroupActionError):
            GroupAction.finite([-np.eye(2)], [0.0, 0.0])

    def test_circle_generator_must_be_periodic(self):
        with self.assertRaises(GroupActionError):
            GroupAction.circle([[0.0, -0.5], [0.5, 0.0]], 8, [0.0, 0.0])
        circle = GroupAction.circle([[0.0, -1.0], [1.0, 0.0]], 8, [0.0, 0.0])
        np.testing.assert_allclose(circle.weights.sum(), 1.0)
        np.testing.assert_allclose(circle.element(np.pi), -np.eye(2), atol=1e-12)

    def test_rotations_preserve_lie_poisson(self):
        pi = BivectorField(ChartBox.cube('so3*', 3, 1.5), SO3)
        points = SampleGenerator(4).in_ball(np.zeros(3), 1.0, 10)
        self.assertLess(z4().check_poisson(pi, points), 1e-12)

    def test_reflection_does_not(self):
        pi = BivectorField(ChartBox.cube('so3*', 3, 1.5), SO3)
        mirror = GroupAction.finite([np.eye(3), np.diag([-1.0, 1.0, 1.0])], [0.0, 0.0, 0.0])
        with self.assertRaises(GroupActionError):
            mirror.check_poisson(pi, [[0.1, 0.2, 0.3]])

    def test_lift_inverts_transpose_on_fibres(self):
        action = z4((0.0, 0.0, 0.0))
        lifted = action.lift([[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]])
        np.testing.assert_allclose(lifted[1, 0], [0.0, 1.0, 0.0, 0.0, 1.0, 0.0], atol=1e-12)


class SquareRootTests(SimpleTestCase):
    """Test the principal square root and the b-map"""

    def test_diagonal(self):
        np.testing.assert_allclose(principal_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_complex_spectrum(self):
        m = np.array([[1.0, -1.0], [1.0, 1.0]])
        root = principal_sqrt(m)
        np.testing.assert_allclose(root @ root, m, atol=1e-12)
        self.assertTrue(np.all(np.linalg.eigvals(root).real > 0.0))

    def test_negative_eigenvalue(self):
        with self.assertRaises(SpectrumOnCut):
            principal_sqrt(np.diag([-1.0, 1.0]))

    def test_stack(self):
        stack = np.stack([np.diag([4.0, 1.0]), np.diag([1.0, 16.0])])
        np.testing.assert_allclose(principal_sqrt(stack), np.stack([np.diag([2.0, 1.0]), np.diag([1.0, 4.0])]))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_b_map_pulls_back(self, seed):
        """
        Property: bᵀω₀b = ω for ω near ω₀
        """
        sampler = SampleGenerator(seed)
        omega0 = -standard_bivector(4)
        perturbation = sampler.antisymmetric(4, 1)[0]
        omega = omega0 + 0.2 * perturbation / np.linalg.norm(perturbation, 2)
        b = b_map(SymplecticPair(omega0, omega))
        np.testing.assert_allclose(b.T @ omega0 @ b, omega, atol=1e-10)

    def test_linear_moser_agrees_with_b_map(self):
        omega0 = -standard_bivector(2)
        omega = np.array([[0.0, 1.2], [-1.2, 0.0]])
        np.testing.assert_allclose(linear_moser_sqrt(omega0, omega, 64), b_map(SymplecticPair(omega0, omega)),
                                   atol=1e-8)

    def test_b_map_suite(self):
        result = check_b_map(SampleGenerator(11), (2, 4), trials=5)
        for record in result.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual}')
        moser_rows = [row for row in result.rows if row.kind == 'b_linear_moser']
        self.assertEqual(len(moser_rows), 10)


class DarbouxTests(SimpleTestCase):
    """Test symplectic Gram-Schmidt"""

    def test_darboux_basis(self):
        sampler = SampleGenerator(2)
        frame = sampler.invertible(4, 1, 0.2)[0]
        omega0 = frame.T @ (-standard_bivector(4)) @ frame
        d = darboux_basis(omega0)
        np.testing.assert_allclose(d.T @ omega0 @ d, -standard_bivector(4), atol=1e-10)

    def test_degenerate_form(self):
        omega = np.zeros((4, 4))
        omega[0, 1], omega[1, 0] = 1.0, -1.0
        with self.assertRaises(NotInvertible):
            darboux_basis(omega)


class InvariantObjectTests(SimpleTestCase):
    """Test invariant sprays and transversals"""

    def test_invariant_transversal_of_so3(self):
        pi = BivectorField(ChartBox.cube('so3*', 3, 1.5), SO3)
        embedding = invariant_transversal(pi, z4(), [0.0, 0.0, 1.0], 0.2)
        self.assertEqual(embedding.parameter_dimension, 1)
        np.testing.assert_allclose(embedding.derivative([[0.0]])[0][:, 0], [0.0, 0.0, 1.0], atol=1e-12)

    def test_average_one_form(self):
        action = z4((0.0, 0.0, 0.0))
        points = SampleGenerator(3).uniform(-1.0, 1.0, (5, 3))

        def radial(x):
            return np.hstack([2.0 * x[:, :2], np.zeros((len(x), 1))])

        np.testing.assert_allclose(average_one_form(action, radial, points), radial(points), atol=1e-12)
        constant = average_one_form(action, lambda x: np.tile([1.0, 0.0, 0.0], (len(x), 1)), points)
        np.testing.assert_allclose(constant, 0.0, atol=1e-12)
        np.testing.assert_allclose(average_metric(action), np.eye(3), atol=1e-12)

    def test_averaged_spray_is_equivariant(self):
        pi = BivectorField(ChartBox.cube('so3*', 3, 1.5), SO3)
        quadratic = SampleGenerator(6).normal((3, 3, 3))
        spray = SprayField(pi, CotangentChart(pi.box, 1.0), 0.1 * quadratic)
        action = z4((0.0, 0.0, 0.0))
        states = np.hstack([np.array([[0.2, 0.1, 0.3], [0.0, -0.3, 0.1]]),
                            np.array([[0.1, 0.0, 0.2], [-0.2, 0.1, 0.0]])])
        averaged = invariant_spray(pi, action, spray=spray)
        self.assertLess(spray_equivariance(averaged, action, states, 1.0, 16), 1e-12)
        self.assertGreater(spray_equivariance(spray, action, states, 1.0, 16), 1e-6)


class SplittingTests(SimpleTestCase):
    """Test the splitting chart"""

    def test_symplectic_split_with_symmetry(self):
        """Test the splitting of standard R⁴ under x ↦ -x"""
        pi = BivectorField(ChartBox.cube('R4', 4, 2.0), {'1,2': '1', '3,4': '1'}, 'R4')
        action = GroupAction.finite([np.eye(4), -np.eye(4)], np.zeros(4), 'Z2')
        split = weinstein_split(pi, np.zeros(4), action, fiber_radius=0.2, half_width=0.2, nodes=4, steps=4,
                                moser_steps=2, primitive_nodes=4)
        self.assertEqual((split.rank, split.k), (4, 0))
        for record in split.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual}')
        samples = SampleGenerator(1).uniform(-0.1, 0.1, (3, 4))
        result = split.verify(samples, tol=1e-8)
        for record in result.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual}')


    def test_so3_split_without_symmetry(self):
        """Test the splitting of so(3)* at (0, 0, 1) under the trivial group"""
        pi = BivectorField(ChartBox.cube('so3*', 3, 1.5), SO3, 'so3')
        split = weinstein_split(pi, [0.0, 0.0, 1.0], fiber_radius=0.1, half_width=0.1, nodes=8, steps=16,
                                moser_steps=4, primitive_nodes=4)
        self.assertEqual((split.rank, split.k), (2, 1))
        self.assertTrue(split.action.is_trivial)
        for record in split.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual}')
        samples = SampleGenerator(3).uniform(-0.05, 0.05, (2, 3))
        result = split.verify(samples, tol=1e-3)
        for record in result.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual}')

        # repeated chart points reuse σ̃ instead of flowing again
        first = split.chart_map(samples)
        evaluated, hits = len(split.sigma_table), split.sigma_table.hits
        np.testing.assert_array_equal(split.chart_map(samples), first)
        self.assertEqual(len(split.sigma_table), evaluated)
        self.assertGreater(split.sigma_table.hits, hits)


class TrivializationTests(SimpleTestCase):
    """Test the symplectic trivialization of a family of fibre forms"""

    def test_scaled_family(self):
        """Test Φ_y = √(1 + y)·I for σ_y = (1 + y)σ₀"""
        sigma0 = -standard_bivector(2)

        def sigma(y):
            y = np.array(y, dtype=float, ndmin=2)
            values = (1.0 + y[:, 0])[:, None, None] * sigma0
            return values, np.broadcast_to(sigma0[..., None], values.shape + (1,)).copy()

        action = GroupAction.trivial(2, [0.0, 0.0])
        trivialization = equivariant_trivialization(sigma, action, trivial_cocycle(2), np.zeros(1))
        phi, d_phi = trivialization.evaluate([[0.21]], with_derivative=True)
        np.testing.assert_allclose(phi[0], 1.1 * np.eye(2), atol=1e-12)
        np.testing.assert_allclose(d_phi[0, :, :, 0], np.eye(2) / 2.2, atol=1e-10)
        result = trivialization.check([[0.0], [0.21], [-0.3]], np.ones((1, 1, 1)))
        for record in result.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual}')

    def test_degenerate_reference(self):
        def sigma(y):
            y = np.array(y, dtype=float, ndmin=2)
            return np.zeros((len(y), 2, 2)), np.zeros((len(y), 2, 2, 1))

        with self.assertRaises(NotInvertible):
            equivariant_trivialization(sigma, GroupAction.trivial(2, [0.0, 0.0]), trivial_cocycle(2), np.zeros(1))
