"""
Tests for Poisson transversals, the conormal chart and the local model
"""

import numpy as np
from django.test import SimpleTestCase

from core.services.errors import NormalFormError, NotImmersion, NotOnTransversal, NotTransversal
from core.services.expressions import ChartBox
from core.services.fields import BivectorField
from core.services.spray import flat_spray
from core.services.transversal import (
    ChartMap, Embedding, SigmaTable, check_model_consistency, check_pullback_transversal,
    check_transversal, check_transversal_suite, conormal_chart, local_model_matrices,
    sigma_batch, sigma_tilde, split_restriction, transversal_criteria, verify_normal_form
)


SO3 = {'1,2': 'x3', '2,3': 'x1', '3,1': 'x2'}


def so3_axis():
    """so(3)* with the x3-axis through (0, 0, 1)"""
    box = ChartBox.cube('so3*', 3, 1.5)
    pi = BivectorField(box, SO3, 'so3')
    axis = Embedding.affine(box, [0.0, 0.0, 1.0], [[0.0], [0.0], [1.0]],
                            ChartBox.cube('axis', 1, 0.3), 'axis')
    return pi, axis


def r4_plane():
    """Standard symplectic R⁴ with the x1x2 plane"""
    box = ChartBox.cube('R4', 4, 2.0)
    pi = BivectorField(box, {'1,2': '1', '3,4': '1'}, 'R4')
    plane = Embedding.affine(box, [0.0] * 4, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]],
                             ChartBox.cube('plane', 2, 0.5), 'plane')
    return pi, plane


class EmbeddingTests(SimpleTestCase):
    """Test parametrized embeddings"""

    def test_affine_evaluation(self):
        _, axis = so3_axis()
        np.testing.assert_allclose(axis.evaluate([[0.2]])[0], [0.0, 0.0, 1.2])
        np.testing.assert_allclose(axis.derivative([[0.2]])[0], [[0.0], [0.0], [1.0]])

    def test_locate(self):
        _, axis = so3_axis()
        np.testing.assert_allclose(axis.locate([0.0, 0.0, 1.1]), [0.1], atol=1e-10)
        with self.assertRaises(NotOnTransversal):
            axis.locate([0.5, 0.0, 1.0])

    def test_point_embedding(self):
        box = ChartBox.cube('R2', 2, 1.0)
        point = Embedding.at_point(box, [0.1, 0.2])
        self.assertEqual(point.parameter_dimension, 0)
        np.testing.assert_allclose(point.evaluate(np.zeros((1, 0)))[0], [0.1, 0.2])
        self.assertEqual(point.locate([0.1, 0.2]).shape, (0,))

    def test_not_an_immersion(self):
        box = ChartBox.cube('R3', 3, 1.5)
        curve = Embedding(ChartBox.cube('t', 1, 1.0), ['x1^2', '0', '1'], box, 'cusp')
        with self.assertRaises(NotImmersion):
            curve.check([[0.0]])


class TransversalityTests(SimpleTestCase):
    """Test the transversality criteria and the splitting of π along X"""

    def test_axis_is_transversal(self):
        pi, axis = so3_axis()
        td = check_transversal(pi, axis, [[-0.3], [0.0], [0.3]])
        induced, pairing = split_restriction(pi, td, [0.0])
        np.testing.assert_allclose(induced, [[0.0]])
        np.testing.assert_allclose(pairing, [[0.0, 1.0], [-1.0, 0.0]])

    def test_line_through_origin_is_not(self):
        """Test that a line through the zero of the so(3) structure is not transversal"""
        box = ChartBox.cube('so3*', 3, 1.5)
        pi = BivectorField(box, SO3)
        line = Embedding.affine(box, [0.0, 0.0, 0.0], [[1.0], [0.0], [0.0]], ChartBox.cube('t', 1, 0.2))
        criteria = transversal_criteria(pi, line, [0.0])
        self.assertLess(max(criteria.values()), 1e-8)
        with self.assertRaises(NotTransversal) as ctx:
            check_transversal(pi, line, [[0.0]])
        self.assertEqual(ctx.exception.parameter, [0.0])

    def test_point_in_symplectic_plane(self):
        box = ChartBox.cube('R2', 2, 1.0)
        pi = BivectorField(box, {'1,2': '1'})
        td = check_transversal(pi, Embedding.at_point(box, [0.0, 0.0]), None)
        induced, pairing = split_restriction(pi, td, np.zeros(0))
        self.assertEqual(induced.shape, (0, 0))
        np.testing.assert_allclose(pairing, [[0.0, 1.0], [-1.0, 0.0]])

    def test_symplectic_plane_induces_symplectic_structure(self):
        pi, plane = r4_plane()
        td = check_transversal(pi, plane, [[0.1, -0.2]])
        induced, _ = split_restriction(pi, td, [0.1, -0.2])
        np.testing.assert_allclose(induced, [[0.0, 1.0], [-1.0, 0.0]], atol=1e-12)

    def test_restriction_needs_matching_bivector(self):
        pi, plane = r4_plane()
        td = check_transversal(pi, plane, [[0.0, 0.0]])
        other = BivectorField(pi.box, {'1,2': '2', '3,4': '1'}, 'R4 scaled')
        with self.assertRaises(NormalFormError):
            split_restriction(other, td, [0.0, 0.0])

    def test_suite_on_nonpoisson_field(self):
        """Test that the criteria agree on a transversal of a non-Poisson field"""
        box = ChartBox.cube('R3', 3, 1.0)
        pi = BivectorField(box, {'1,2': 'x2', '2,3': '1'})
        line = Embedding.affine(box, [0.0, 0.0, 0.0], [[1.0], [0.0], [0.0]], ChartBox.cube('t', 1, 0.2))
        td = check_transversal(pi, line, [[0.0]])
        result = check_transversal_suite(pi, td, [[-0.1], [0.0], [0.1]])
        self.assertTrue(result.passed, [(r.name, r.residual) for r in result.records])


class LocalModelTests(SimpleTestCase):
    """Test the conormal chart, σ̃ and the local normal form"""

    def test_model_needs_a_gauge_off_x(self):
        """Test that without σ̃ the pulled-back structure is not a bivector"""
        models, margins = local_model_matrices(np.zeros((1, 1, 1)), np.zeros((1, 3, 3)))
        self.assertEqual(margins[0], 0.0)
        self.assertTrue(np.all(np.isnan(models)))

    def test_sigma_along_zero_section(self):
        """Test σ̃ on X against the conormal pairing"""
        pi, axis = so3_axis()
        td = check_transversal(pi, axis, [[0.0]])
        cc = conormal_chart(td, 0.2)
        s = flat_spray(pi, 0.4)
        sigma = sigma_tilde(s, cc, [0.1, 0.0, 0.0], nodes=8, steps=16)
        np.testing.assert_allclose(sigma, -sigma.T)
        # on X the fibre block is minus the conormal pairing
        self.assertAlmostEqual(abs(sigma[0, 1]), 0.0, places=12)
        self.assertAlmostEqual(sigma[1, 2], -1.1, places=10)

    def test_sigma_table_reuses_points(self):
        pi, axis = so3_axis()
        cc = conormal_chart(check_transversal(pi, axis, [[0.0]]), 0.2)
        s = flat_spray(pi, 0.4)
        table = SigmaTable(s, cc, nodes=8, steps=16)
        z = np.array([[0.1, 0.05, 0.0], [0.0, -0.1, 0.1], [0.1, 0.05, 0.0]])
        sigma, alive = table(z)
        self.assertEqual(len(table), 2)
        self.assertEqual(table.hits, 1)
        expected, _ = sigma_batch(s, cc, z[:2], 8, 16)
        np.testing.assert_allclose(sigma[:2], expected, atol=1e-14)
        np.testing.assert_array_equal(sigma[2], sigma[0])
        self.assertTrue(np.all(alive))
        np.testing.assert_array_equal(table.matrices(z[1:]), sigma[1:])
        self.assertEqual((len(table), table.hits), (2, 3))

    def test_so3_normal_form(self):
        pi, axis = so3_axis()
        td = check_transversal(pi, axis, [[0.0]])
        cc = conormal_chart(td, 0.2)
        s = flat_spray(pi, 0.4)
        samples = np.array([[0.0, 0.05, -0.05], [0.1, -0.1, 0.0], [-0.2, 0.03, 0.08]])
        result = verify_normal_form(pi, td, cc, s, samples, tol=1e-4, nodes=16, steps=32)
        for record in result.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual} {record.detail}')
        sigma = lambda z: sigma_batch(s, cc, z, 8, 16)[0]
        consistency = check_model_consistency(td, cc, sigma, samples[:2])
        self.assertTrue(consistency.passed, [(r.name, r.residual) for r in consistency.records])

    def test_symplectic_normal_form_is_exact(self):
        pi, plane = r4_plane()
        td = check_transversal(pi, plane, [[0.0, 0.0]])
        cc = conormal_chart(td, 0.3)
        s = flat_spray(pi, 0.6)
        samples = np.array([[0.1, 0.2, 0.1, -0.2], [-0.3, 0.0, 0.2, 0.2]])
        result = verify_normal_form(pi, td, cc, s, samples, tol=1e-10, nodes=4, steps=4)
        self.assertTrue(result.passed, [(r.name, r.residual) for r in result.records])
        sigma = lambda z: sigma_batch(s, cc, z, 4, 4)[0]
        consistency = check_model_consistency(td, cc, sigma, samples)
        self.assertTrue(consistency.passed, [(r.name, r.residual) for r in consistency.records])

    def test_normal_form_reports_lost_transversality(self):
        """Test that a sample where X stops being transversal fails as NotTransversal"""
        box = ChartBox.cube('so3*', 3, 1.5)
        pi = BivectorField(box, SO3, 'so3')
        # the grid of the chart check (-0.2, 0.05, 0.3) misses t = 0
        line = Embedding.affine(box, [0.0, 0.0, 0.0], [[1.0], [0.0], [0.0]],
                                ChartBox('t', ((-0.2, 0.3),)), 'x1-line')
        td = check_transversal(pi, line, [[0.1]])
        cc = conormal_chart(td, 0.1)
        s = flat_spray(pi, 0.4)
        samples = np.array([[0.0, 0.05, 0.0], [0.1, 0.05, -0.05]])
        result = verify_normal_form(pi, td, cc, s, samples, nodes=8, steps=16)
        record = next(r for r in result.records if r.name == 'normal_form')
        self.assertFalse(record.passed)
        self.assertIn('NotTransversal', record.detail)
        self.assertNotIn('NotGraph', record.detail)
        self.assertTrue(np.isinf(result.rows[0].value))

        sigma = lambda z: sigma_batch(s, cc, z, 8, 16)[0]
        consistency = check_model_consistency(td, cc, sigma, samples[:1])
        self.assertIn('NotTransversal', consistency.records[1].detail)

    def test_frame_continuity(self):
        pi, axis = so3_axis()
        cc = conormal_chart(check_transversal(pi, axis, [[0.0]]), 0.2)
        self.assertLess(cc.frame_continuity([[0.0], [0.2]]), 1e-6)


class PullbackTests(SimpleTestCase):
    """Test preimages of transversals under Poisson maps"""

    def setUp(self):
        self.pi, self.axis = so3_axis()
        self.td = check_transversal(self.pi, self.axis, [[0.0]])

    def test_identity_map(self):
        identity = ChartMap(self.pi.box, ['x1', 'x2', 'x3'], self.pi.box, 'identity')
        result = check_pullback_transversal(identity, self.pi.matrix, self.pi, self.td, [[0.0, 0.0, 1.1]])
        self.assertTrue(result.passed, [(r.name, r.residual, r.detail) for r in result.records])

    def test_scaling_is_not_poisson(self):
        """Test that x ↦ 2x is not Poisson for a linear structure"""
        scaling = ChartMap(self.pi.box, ['2*x1', '2*x2', '2*x3'], self.pi.box, 'double')
        result = check_pullback_transversal(scaling, self.pi.matrix, self.pi, self.td, [[0.0, 0.0, 0.55]])
        self.assertFalse(result.record('poisson_map').passed)
        self.assertIn('NotPoissonMap', result.record('map_transverse').detail)
