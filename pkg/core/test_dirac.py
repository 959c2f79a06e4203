"""
Tests for pointwise Dirac linear algebra
"""

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from core.services.dirac import (
    DiracFrame, dirac_gauge, dirac_graph, dirac_graph_matrix, dirac_pullback,
    dirac_restrict, dirac_to_bivector, graph_margin, two_form_graph
)
from core.services.errors import DiracFrameError, NotGraph, NotImmersion, NotSubmersion
from core.services.expressions import ChartBox
from core.services.fields import BivectorField, gauge_matrices
from core.services.sampling import SampleGenerator


PLANE = np.array([[0.0, 1.0], [-1.0, 0.0]])
R4 = np.array([
    [0.0, 1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0, 0.0],
])


class DiracFrameTests(SimpleTestCase):
    """Test frame validation and comparison"""

    def test_non_isotropic_frame(self):
        with self.assertRaises(DiracFrameError):
            DiracFrame(np.eye(2), np.eye(2))

    def test_rank_deficient_frame(self):
        with self.assertRaises(DiracFrameError):
            DiracFrame(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_reframed_is_same_subspace(self):
        frame = dirac_graph_matrix(PLANE)
        change = np.array([[2.0, 1.0], [0.0, 3.0]])
        self.assertLess(frame.distance(frame.reframed(change)), 1e-12)

    def test_graph_round_trip(self):
        box = ChartBox.cube('R3', 3, 1.0)
        pi = BivectorField(box, {'1,2': 'x3', '2,3': 'x1', '3,1': 'x2'})
        x = [0.3, -0.2, 0.5]
        np.testing.assert_allclose(dirac_to_bivector(dirac_graph(pi, x)), pi.at(x), atol=1e-12)

    def test_two_form_graph_is_inverse_bivector(self):
        """Test that the graph of ω equals the graph of ω^{-1}"""
        omega = np.array([[0.0, -2.0], [2.0, 0.0]])
        np.testing.assert_allclose(dirac_to_bivector(two_form_graph(omega)), np.linalg.inv(omega))

    def test_tangent_bundle_is_not_a_graph(self):
        """Test that TM (graph of the zero 2-form) is not the graph of a bivector"""
        frame = two_form_graph(np.zeros((2, 2)))
        self.assertEqual(graph_margin(frame), 0.0)
        with self.assertRaises(NotGraph):
            dirac_to_bivector(frame)


class DiracOperationTests(SimpleTestCase):
    """Test gauge transforms, pullbacks and restrictions"""

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_gauge_matches_bivector_formula(self, seed):
        """
        Property: gauging the graph of π by B gives the graph of π(I + Bπ)^{-1}
        """
        sampler = SampleGenerator(seed)
        pi = sampler.antisymmetric(4, 1)[0]
        b = 0.05 * sampler.antisymmetric(4, 1)[0]
        gauged = dirac_to_bivector(dirac_gauge(dirac_graph_matrix(pi), b))
        np.testing.assert_allclose(gauged, gauge_matrices(pi, b), atol=1e-9)

    def test_restriction_to_symplectic_plane(self):
        """Test restricting the standard structure on R⁴ to the x1x2 plane"""
        di = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
        restricted = dirac_restrict(dirac_graph_matrix(R4), di)
        self.assertEqual(restricted.dimension, 2)
        np.testing.assert_allclose(dirac_to_bivector(restricted), PLANE, atol=1e-12)

    def test_pullback_then_restrict_along_section(self):
        """Test that pulling back along a projection and restricting to a section recovers L"""
        dp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        base = dirac_graph_matrix(PLANE)
        pulled = dirac_pullback(base, dp)
        self.assertEqual(pulled.dimension, 3)
        with self.assertRaises(NotGraph):
            dirac_to_bivector(pulled)
        section = dirac_restrict(pulled, dp.T)
        self.assertLess(section.distance(base), 1e-10)

    def test_pullback_needs_submersion(self):
        with self.assertRaises(NotSubmersion):
            dirac_pullback(dirac_graph_matrix(PLANE), np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))

    def test_restriction_needs_immersion(self):
        di = np.array([[1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        with self.assertRaises(NotImmersion):
            dirac_restrict(dirac_graph_matrix(R4), di)
