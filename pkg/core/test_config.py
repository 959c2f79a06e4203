"""
Tests for run configuration validation and the example library
"""

import copy
import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from core.serializers import ReportSerializer, load_config, read_config, validate_config
from core.services.errors import ConfigError
from core.services.library import build_problem, builtin_examples, find_example, summarize
from core.services.reports import CheckRecord, Report, config_digest


PLANE = {
    'name': 'plane',
    'manifold': {'dimension': 2, 'box': [[-1.0, 1.0], [-1.0, 1.0]], 'bivector': {'1,2': '1'}},
    'samples': {'count': 4, 'seed': 7},
}


def plane(**sections):
    data = copy.deepcopy(PLANE)
    data.update(sections)
    return data


class ValidateConfigTests(SimpleTestCase):
    """Test the run configuration serializer"""

    def test_minimal_config(self):
        config = validate_config(plane(), 'check-jacobi')
        self.assertEqual(config['manifold']['bivector'], {'1,2': '1'})
        self.assertEqual(config['samples']['seed'], 7)

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_config(plane(colour='red'))
        self.assertIn('colour', ctx.exception.errors)

    def test_unknown_nested_key(self):
        data = plane()
        data['manifold']['metric'] = 'euclidean'
        with self.assertRaises(ConfigError) as ctx:
            validate_config(data)
        self.assertIn('manifold', ctx.exception.errors)

    def test_diagonal_slot(self):
        data = plane()
        data['manifold']['bivector'] = {'1,1': '1'}
        with self.assertRaises(ConfigError) as ctx:
            validate_config(data)
        self.assertIn('bivector', ctx.exception.errors['manifold'])

    def test_bad_expression(self):
        data = plane()
        data['manifold']['bivector'] = {'1,2': 'tan(x1)'}
        with self.assertRaises(ConfigError):
            validate_config(data)

    def test_box_length(self):
        data = plane()
        data['manifold']['box'] = [[-1.0, 1.0]]
        with self.assertRaises(ConfigError):
            validate_config(data)

    def test_empty_interval(self):
        data = plane()
        data['manifold']['box'] = [[1.0, -1.0], [-1.0, 1.0]]
        with self.assertRaises(ConfigError):
            validate_config(data)

    def test_samples_need_a_seed(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_config(plane(samples={'count': 5}))
        self.assertIn('samples', ctx.exception.errors)

    def test_sampling_commands_need_samples(self):
        with self.assertRaises(ConfigError):
            validate_config(plane(samples={'count': 0}), 'realize')

    def test_normal_form_needs_a_transversal(self):
        validate_config(plane(), 'check-jacobi')
        with self.assertRaises(ConfigError) as ctx:
            validate_config(plane(), 'normal-form')
        self.assertIn('transversal', ctx.exception.errors)

    def test_unknown_command(self):
        with self.assertRaises(ConfigError):
            validate_config(plane(), 'integrate')

    def test_transversal_dimension(self):
        transversal = {'kind': 'point', 'origin': [0.0, 0.0, 0.0]}
        with self.assertRaises(ConfigError) as ctx:
            validate_config(plane(transversal=transversal))
        self.assertIn('transversal', ctx.exception.errors)

    def test_affine_transversal_needs_one_interval_per_direction(self):
        transversal = {'kind': 'affine', 'origin': [0.0, 0.0], 'directions': [[1.0, 0.0]], 'box': []}
        with self.assertRaises(ConfigError):
            validate_config(plane(transversal=transversal))

    def test_group_matrix_shape(self):
        with self.assertRaises(ConfigError) as ctx:
            validate_config(plane(group={'kind': 'finite', 'matrices': [[[1.0]]]}))
        self.assertIn('group', ctx.exception.errors)

    def test_moser_alpha_components(self):
        with self.assertRaises(ConfigError):
            validate_config(plane(moser={'alpha': ['x2']}), 'moser')
        config = validate_config(plane(moser={'alpha': ['x2', '0']}), 'moser')
        self.assertFalse(config['moser']['extension'])

    def test_extension_needs_a_transversal(self):
        with self.assertRaises(ConfigError):
            validate_config(plane(moser={'extension': True}), 'moser')


class ReadConfigTests(SimpleTestCase):
    """Test decoding of configuration files"""

    def write(self, directory, text):
        path = Path(directory) / 'run.json'
        path.write_text(text, encoding='utf-8')
        return path

    def test_malformed_json_reports_position(self):
        with tempfile.TemporaryDirectory() as directory:
            path = self.write(directory, '{\n  "name": "plane",\n  "manifold": }\n')
            with self.assertRaises(ConfigError) as ctx:
                read_config(path)
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn('line 3', str(ctx.exception))

    def test_top_level_must_be_an_object(self):
        with tempfile.TemporaryDirectory() as directory:
            path = self.write(directory, '[1, 2]')
            with self.assertRaises(ConfigError):
                read_config(path)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            read_config('/nonexistent/run.json')

    def test_load_config(self):
        with tempfile.TemporaryDirectory() as directory:
            path = self.write(directory, json.dumps(plane()))
            config = load_config(path, 'check-jacobi')
        self.assertEqual(config['name'], 'plane')


class LibraryTests(SimpleTestCase):
    """Test the built-in examples"""

    def test_every_example_validates(self):
        names = [config['name'] for config in builtin_examples()]
        self.assertIn('so3star', names)
        self.assertIn('nonpoisson_x2', names)
        self.assertEqual(len(names), len(set(names)))

    def test_find_example(self):
        self.assertEqual(find_example('so3star').name, 'so3star.json')
        self.assertEqual(find_example('so3star.json').name, 'so3star.json')
        with self.assertRaises(ConfigError):
            find_example('so4star')

    def test_build_so3star(self):
        config = load_config(find_example('so3star'))
        problem = build_problem(config)
        self.assertEqual(problem.dimension, 3)
        self.assertEqual(problem.group.order, 4)
        self.assertEqual(problem.embedding.parameter_dimension, 1)
        self.assertEqual(list(problem.base_point), [0.0, 0.0, 1.0])
        self.assertEqual(problem.bivector.at([0.1, 0.2, 0.3])[0, 2], -0.2)

    def test_summarize(self):
        summary = summarize(load_config(find_example('so3star')))
        self.assertEqual(summary['dimension'], 3)
        self.assertEqual(summary['transversal'], 'axis (affine)')
        self.assertEqual(summary['group'], 'finite')
        self.assertEqual(summarize(plane())['transversal'], '-')


class ReportSerializerTests(SimpleTestCase):
    """Test that written reports follow the report schema"""

    def report(self, *records):
        config = validate_config(plane())
        return Report('check-jacobi', 'plane', config_digest(config), '0.1.0', list(records))

    def test_valid_report(self):
        report = self.report(CheckRecord('jacobi.jacobiator', 0.0, 1e-9))
        serializer = ReportSerializer(data=json.loads(report.to_json()))
        self.assertTrue(serializer.is_valid(), serializer.errors)

    def test_failed_record_with_infinite_residual(self):
        report = self.report(CheckRecord('setup.error', float('inf'), 0.0, passed=False, detail='NotTransversal'))
        data = json.loads(report.to_json())
        self.assertIsNone(data['records'][0]['residual'])
        self.assertFalse(data['passed'])
        self.assertTrue(ReportSerializer(data=data).is_valid())

    def test_verdict_must_match_records(self):
        data = json.loads(self.report(CheckRecord('jacobi.jacobiator', 1.0, 1e-9)).to_json())
        data['passed'] = True
        self.assertFalse(ReportSerializer(data=data).is_valid())
