"""
Tests for gauge paths, Moser flows and relative primitives
"""

import numpy as np
from django.test import SimpleTestCase

from core.services.errors import NotVanishingOnX, SingularGauge
from core.services.expressions import ChartBox
from core.services.fields import BivectorField, OneFormField, exterior_derivative_numeric
from core.services.moser import (
    GaugePath, MoserField, NumericGaugePath, check_moser, check_primitive, gauge_path_eval,
    linear_extension, moser_flow, relative_primitive, verify_extension_independence
)
from core.services.spray import flat_spray
from core.services.transversal import Embedding, check_transversal, conormal_chart, sigma_batch


PLANE = np.array([[0.0, 1.0], [-1.0, 0.0]])


def plane_path(alpha):
    box = ChartBox.cube('R2', 2, 1.5)
    return GaugePath(BivectorField(box, {'1,2': '1'}, 'plane'), OneFormField(box, alpha, 'alpha'))


def bump(points):
    """d(y f1² df2) on (y, f1, f2): closed and zero along f = 0"""
    points = np.array(points, dtype=float, ndmin=2)
    y, f1 = points[:, 0], points[:, 1]
    result = np.zeros((len(points), 3, 3))
    result[:, 0, 2] = f1**2
    result[:, 1, 2] = 2.0 * y * f1
    return result - np.swapaxes(result, 1, 2)


class GaugePathTests(SimpleTestCase):
    """Test π_t = π^{t dα}"""

    def test_scaled_plane(self):
        """Test that α = x2 dx1 rescales the plane structure by 1/(1+t)"""
        path = plane_path(['x2', '0'])
        np.testing.assert_allclose(gauge_path_eval(path, 0.5, [0.2, 0.3]), PLANE / 1.5)
        np.testing.assert_allclose(path.one_shot([0.2, 0.3]), PLANE / 2.0)

    def test_singular_gauge(self):
        path = plane_path(['neg(x2)', '0'])
        with self.assertRaises(SingularGauge) as ctx:
            path.at(1.0, [0.1, 0.1])
        self.assertEqual(ctx.exception.time, 1.0)

    def test_numeric_path_matches_exact(self):
        path = plane_path(['x2*x1', 'sin(x1)'])
        numeric = NumericGaugePath(path.box, path.bivector.matrix, path.alpha.values)
        points = np.array([[0.1, 0.2], [-0.3, 0.4]])
        times = np.array([0.3, 0.3])
        exact, _ = path.matrices(times, points)
        approximate, ok = numeric.matrices(times, points)
        self.assertTrue(np.all(ok))
        np.testing.assert_allclose(approximate, exact, atol=1e-8)
        v_exact, j_exact, _ = path.field(times, points, True)
        v_numeric, j_numeric, _ = numeric.field(times, points, True)
        np.testing.assert_allclose(v_numeric, v_exact, atol=1e-8)
        np.testing.assert_allclose(j_numeric, j_exact, atol=1e-6)


class MoserFlowTests(SimpleTestCase):
    """Test the Moser isotopy of a gauge path"""

    def test_moser_suite(self):
        mf = MoserField(plane_path(['x2', '0']))
        points = np.array([[0.5, 0.5], [-0.5, 0.2], [0.0, -0.9], [1.0, 1.0]])
        result = check_moser(mf, points, tol=1e-8, steps=128)
        for record in result.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual} {record.detail}')

    def test_flow_is_explicit(self):
        """Test φ^{1,0}(x1, x2) = (x1, x2/2)"""
        result = moser_flow(MoserField(plane_path(['x2', '0'])), 0.0, 1.0, [0.4, 0.8], steps=128)
        np.testing.assert_allclose(result.state, [0.4, 0.4], atol=1e-10)
        np.testing.assert_allclose(result.jacobian, np.diag([1.0, 0.5]), atol=1e-10)

    def test_flow_into_singular_gauge(self):
        with self.assertRaises(SingularGauge):
            moser_flow(MoserField(plane_path(['neg(x2)', '0'])), 0.0, 1.0, [0.3, 0.0], steps=16)


class PrimitiveTests(SimpleTestCase):
    """Test the fibrewise homotopy operator"""

    def test_primitive_of_closed_form(self):
        points = np.array([[0.2, 0.1, -0.3], [-0.4, 0.5, 0.2]])
        result = check_primitive(bump, 1, points, nodes=8)
        for record in result.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual}')

    def test_primitive_vanishes_to_second_order(self):
        eta = relative_primitive(bump, 1, [0.3, 0.0, 0.0], nodes=8)
        np.testing.assert_allclose(eta, 0.0)

    def test_difference_must_vanish_on_x(self):
        def constant(points):
            result = np.zeros((len(points), 3, 3))
            result[:, 1, 2], result[:, 2, 1] = 1.0, -1.0
            return result

        with self.assertRaises(NotVanishingOnX):
            relative_primitive(constant, 1, [0.0, 0.1, 0.1])


class ExtensionTests(SimpleTestCase):
    """Test independence of the local model from the closed extension"""

    def setUp(self):
        box = ChartBox.cube('so3*', 3, 1.5)
        self.pi = BivectorField(box, {'1,2': 'x3', '2,3': 'x1', '3,1': 'x2'}, 'so3')
        axis = Embedding.affine(box, [0.0, 0.0, 1.0], [[0.0], [0.0], [1.0]], ChartBox.cube('axis', 1, 0.3), 'axis')
        self.td = check_transversal(self.pi, axis, [[0.0]])
        self.cc = conormal_chart(self.td, 0.2)

    def test_linear_extension_is_closed(self):
        extension = linear_extension(self.td)
        d_sigma = exterior_derivative_numeric(extension, np.array([0.1, 0.05, -0.02]), 1e-5)
        self.assertLess(float(np.max(np.abs(d_sigma))), 1e-8)
        value = extension([[0.1, 0.0, 0.0]])[0]
        self.assertAlmostEqual(value[1, 2], -1.1)

    def test_extensions_give_isomorphic_models(self):
        s = flat_spray(self.pi, 0.4)

        def sigma_a(points):
            return sigma_batch(s, self.cc, points, 8, 16)[0]

        samples = np.array([[0.0, 0.05, -0.05], [0.1, -0.04, 0.03]])
        result = verify_extension_independence(self.td, self.cc, sigma_a, linear_extension(self.td), samples,
                                               tol=1e-4, nodes=8, steps=8)
        for record in result.records:
            self.assertTrue(record.passed, f'{record.name}: {record.residual} {record.detail}')
