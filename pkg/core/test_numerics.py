"""
Tests for the integrator, quadrature, sampler and report helpers
"""

import json
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase
from scipy.linalg import expm

from core.services.expressions import ChartBox
from core.services.integrators import FieldEvaluation, gauss_legendre, integrate
from core.services.reports import (
    CheckRecord, Report, ResidualRow, SuiteResult, config_digest, ordered_map,
    probed_radius, refinement_record, worst
)
from core.services.sampling import SampleGenerator


ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


def linear_field(matrix):
    def field(times, states, with_jacobian):
        jacobians = np.broadcast_to(matrix, (states.shape[0],) + matrix.shape) if with_jacobian else None
        return FieldEvaluation(states @ matrix.T, jacobians, np.ones(states.shape[0], dtype=bool))
    return field


class IntegratorTests(SimpleTestCase):
    """Test the fixed-step Runge-Kutta integrator"""

    def test_linear_flow_and_jacobian(self):
        """Test that the flow of x' = Ax matches exp(A)"""
        states = np.array([[1.0, 0.0], [0.3, -0.7]])
        batch = integrate(linear_field(ROTATION), states, 0.0, 1.0, 128)
        exact = expm(ROTATION)
        self.assertTrue(batch.all_alive)
        np.testing.assert_allclose(batch.states, states @ exact.T, atol=1e-9)
        np.testing.assert_allclose(batch.jacobians[1], exact, atol=1e-9)

    def test_backward_time(self):
        batch = integrate(linear_field(ROTATION), [[1.0, 0.0]], 1.0, 0.0, 128, with_jacobian=False)
        np.testing.assert_allclose(batch.states[0], expm(-ROTATION) @ [1.0, 0.0], atol=1e-9)
        self.assertIsNone(batch.jacobians)

    def test_fourth_order_convergence(self):
        states = np.array([[1.0, 0.0]])
        exact = states @ expm(ROTATION).T
        coarse = np.abs(integrate(linear_field(ROTATION), states, 0.0, 1.0, 8).states - exact).max()
        fine = np.abs(integrate(linear_field(ROTATION), states, 0.0, 1.0, 16).states - exact).max()
        self.assertGreater(coarse / fine, 12.0)

    def test_escape_is_recorded(self):
        """Test that a trajectory leaving the domain is frozen with its escape time"""
        def drift(times, states, with_jacobian):
            return FieldEvaluation(np.ones_like(states), None, np.ones(states.shape[0], dtype=bool))

        inside = lambda states: np.abs(states[:, 0]) <= 0.55
        batch = integrate(drift, [[0.0], [-1.0]], 0.0, 1.0, 10, with_jacobian=False, inside=inside)
        self.assertEqual(batch.alive.tolist(), [False, False])
        self.assertAlmostEqual(batch.escape_times[0], 0.5)
        self.assertAlmostEqual(batch.states[0, 0], 0.5)
        # second member starts outside
        self.assertEqual(batch.escape_times[1], 0.0)

    def test_steps_must_be_positive(self):
        with self.assertRaises(ValueError):
            integrate(linear_field(ROTATION), [[1.0, 0.0]], 0.0, 1.0, 0)


class QuadratureTests(SimpleTestCase):
    """Test the Gauss-Legendre rule on [0, 1]"""

    def test_exact_for_degree_2k_minus_1(self):
        nodes, weights = gauss_legendre(4)
        self.assertAlmostEqual(float(weights.sum()), 1.0)
        self.assertAlmostEqual(float(weights @ nodes**7), 1.0 / 8.0)
        self.assertTrue(np.all((nodes > 0.0) & (nodes < 1.0)))

    def test_cached_copies_are_independent(self):
        nodes, _ = gauss_legendre(3)
        nodes[:] = 0.0
        self.assertGreater(float(gauss_legendre(3)[0][1]), 0.0)


class SamplerTests(SimpleTestCase):
    """Test the seeded sampler"""

    def test_same_seed_same_samples(self):
        box = ChartBox.cube('R3', 3, 1.0)
        first = SampleGenerator(42).in_box(box, 5)
        second = SampleGenerator(42).in_box(box, 5)
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, SampleGenerator(43).in_box(box, 5)))

    def test_ball_within_box(self):
        box = ChartBox.cube('R2', 2, 0.5)
        points = SampleGenerator(3).in_ball_within(box, 1.0, 40)
        self.assertEqual(points.shape, (40, 2))
        self.assertTrue(np.all(box.contains(points)))

    def test_antisymmetric(self):
        matrices = SampleGenerator(5).antisymmetric(4, 3)
        np.testing.assert_allclose(matrices, -np.swapaxes(matrices, 1, 2))


class ReportTests(SimpleTestCase):
    """Test check records, refinement and report serialization"""

    def test_record_passes_within_tolerance(self):
        self.assertTrue(CheckRecord('a', 1e-9, 1e-8).passed)
        self.assertFalse(CheckRecord('a', 1e-7, 1e-8).passed)

    def test_infinite_residual_fails(self):
        record = CheckRecord('a', float('inf'), 1.0)
        self.assertFalse(record.passed)
        self.assertIsNone(record.to_dict()['residual'])

    def test_worst(self):
        self.assertEqual(worst([]), 0.0)
        self.assertEqual(worst([1.0, 3.0]), 3.0)
        self.assertEqual(worst([1.0, float('nan')]), float('inf'))

    def test_probed_radius(self):
        """Test that the radius stops below the smallest failing sample"""
        self.assertEqual(probed_radius([0.1, 0.3, 0.2, 0.4], [True, False, True, True]), 0.2)
        self.assertEqual(probed_radius([0.1, 0.2], [True, True]), 0.2)
        self.assertEqual(probed_radius([0.1], [False]), 0.0)

    def test_refinement_record(self):
        """Test fourth-order decay passes and stagnation fails"""
        self.assertTrue(refinement_record('r', 1.6e-5, 1e-6, 32).passed)
        self.assertFalse(refinement_record('r', 2e-6, 1e-6, 32).passed)

    def test_refinement_floor(self):
        """Test that residuals already at round-off pass without decay"""
        self.assertTrue(refinement_record('r', 3e-11, 2e-11, 32).passed)

    def test_digest_ignores_key_order(self):
        self.assertEqual(config_digest({'a': 1, 'b': [1.0, 2]}), config_digest({'b': [1.0, 2], 'a': 1}))
        self.assertNotEqual(config_digest({'a': 1}), config_digest({'a': 2}))

    def test_ordered_map_keeps_order(self):
        self.assertEqual(ordered_map(lambda x: x * x, list(range(10)), threads=4), [x * x for x in range(10)])

    def test_report_conjunction_and_prefix(self):
        report = Report('check-jacobi', 'demo', 'abc', '0.1.0', timing={'seconds': 1.0})
        self.assertFalse(report.passed)
        suite = SuiteResult([CheckRecord('jacobiator', 0.0, 1e-9), CheckRecord('closure', 1.0, 1e-8)])
        report.add(suite, 'jacobi')
        self.assertEqual([r.name for r in report.records], ['jacobi.jacobiator', 'jacobi.closure'])
        self.assertFalse(report.passed)
        data = report.to_dict(include_timing=False)
        self.assertNotIn('timing', data)
        self.assertFalse(data['passed'])

    def test_report_files(self):
        report = Report('realize', 'demo', 'abc', '0.1.0')
        report.add(SuiteResult([CheckRecord('spray', 0.0, 1.0)],
                               [ResidualRow(0, [0.5, 1.0], [0.0, 1.0], 'spray', 1e-12)]))
        with tempfile.TemporaryDirectory() as directory:
            json_path = os.path.join(directory, 'report.json')
            csv_path = os.path.join(directory, 'rows.csv')
            report.write_json(json_path)
            report.write_csv(csv_path)
            with open(json_path) as handle:
                self.assertTrue(json.load(handle)['passed'])
            with open(csv_path) as handle:
                lines = handle.read().splitlines()
        self.assertEqual(lines[0], 'sample,point,covector,kind,value')
        self.assertEqual(len(lines), 2)
