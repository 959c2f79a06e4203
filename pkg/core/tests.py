"""
End-to-end tests of the pnf management command
"""

import csv
import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from core.serializers import ReportSerializer


class PnfCommandTests(SimpleTestCase):
    """Test the pnf command on the built-in examples"""

    def run_pnf(self, *args):
        stdout, stderr = StringIO(), StringIO()
        call_command('pnf', *args, stdout=stdout, stderr=stderr)
        return stdout.getvalue(), stderr.getvalue()

    def report_of(self, *args):
        stdout, _ = self.run_pnf(*args)
        return json.loads(stdout[:stdout.rindex('}') + 1])

    def records_of(self, report):
        return {record['name']: record for record in report['records']}

    def test_list(self):
        stdout, _ = self.run_pnf('list')
        self.assertIn('so3star', stdout)
        self.assertIn('heisenberg', stdout)

    def test_check_jacobi_passes_on_so3star(self):
        with tempfile.TemporaryDirectory() as directory:
            out = Path(directory) / 'report.json'
            rows = Path(directory) / 'rows.csv'
            stdout, _ = self.run_pnf('check-jacobi', 'so3star', '--out', str(out), '--csv', str(rows))
            report = json.loads(out.read_text())
            with open(rows, newline='') as handle:
                lines = list(csv.reader(handle))

        self.assertIn('all', stdout)
        self.assertTrue(report['passed'])
        self.assertEqual(report['config'], 'so3star')
        self.assertTrue(ReportSerializer(data=report).is_valid())
        self.assertLess(report['summary']['max_jacobiator'], 1e-9)
        self.assertEqual(lines[0], ['sample', 'point', 'covector', 'kind', 'value'])
        self.assertEqual(report['summary']['jacobi_samples'], 100)
        self.assertEqual(len(lines), 101)

    def test_reports_are_reproducible(self):
        """Test that two runs with the same seed agree except for timing"""
        reports = []
        for _ in range(2):
            stdout, _ = self.run_pnf('check-jacobi', 'heisenberg', '--seed', '5')
            report = json.loads(stdout[:stdout.rindex('}') + 1])
            report.pop('timing')
            reports.append(report)
        self.assertEqual(reports[0], reports[1])
        self.assertEqual(reports[0]['summary']['seed'], 5)

    def test_non_poisson_fails_with_exit_one(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_pnf('check-jacobi', 'nonpoisson_x2')
        self.assertEqual(ctx.exception.returncode, 1)

    def test_tolerance_flag(self):
        """Test that --tol loosens the primary check and the Jacobiator stays at 1"""
        stdout, _ = self.run_pnf('check-jacobi', 'nonpoisson_x2', '--tol', '2.0')
        report = json.loads(stdout[:stdout.rindex('}') + 1])
        self.assertAlmostEqual(report['summary']['max_jacobiator'], 1.0, delta=1e-9)

    def test_unknown_example_is_a_config_error(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_pnf('check-jacobi', 'so4star')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_missing_config(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_pnf('realize')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_invalid_file_is_a_config_error(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'broken.json'
            path.write_text('{"name": "broken", "manifold": {"dimension": 2}}')
            with self.assertRaises(CommandError) as ctx:
                self.run_pnf('check-jacobi', str(path))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_normal_form_without_transversal(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'plane.json'
            path.write_text(json.dumps({
                'name': 'plane',
                'manifold': {'dimension': 2, 'box': [[-1, 1], [-1, 1]], 'bivector': {'1,2': '1'}},
                'samples': {'count': 3, 'seed': 1},
            }))
            with self.assertRaises(CommandError) as ctx:
                self.run_pnf('normal-form', str(path))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_moser_on_the_plane(self):
        stdout, _ = self.run_pnf('moser', 'symplecticR2')
        report = json.loads(stdout[:stdout.rindex('}') + 1])
        self.assertTrue(report['passed'])
        names = [record['name'] for record in report['records']]
        self.assertIn('gauge.cocycle', names)
        self.assertIn('gauge.stabilization_0_1', names)

    def test_realize_on_the_plane(self):
        report = self.report_of('realize', 'symplecticR2', '--steps', '16', '--quad', '4')
        records = self.records_of(report)
        self.assertTrue(report['passed'], [name for name, r in records.items() if not r['passed']])
        self.assertIn('realization.pushforward', records)
        refinement = records['realization.pushforward_refinement']
        self.assertEqual(refinement['kind'], 'refinement')
        self.assertTrue(refinement['passed'])
        self.assertIn('probed_radius', report['summary'])

    def test_dual_pair_with_restriction(self):
        report = self.report_of('dual-pair', 'symplecticR4', '--steps', '8', '--quad', '4')
        records = self.records_of(report)
        self.assertTrue(report['passed'], [name for name, r in records.items() if not r['passed']])
        self.assertTrue(any(name.startswith('dual_pair.') for name in records))
        self.assertIn('restricted.restricted_orthogonality', records)

    def test_normal_form_of_the_symplectic_plane(self):
        report = self.report_of('normal-form', 'symplecticR4', '--steps', '8', '--quad', '4')
        records = self.records_of(report)
        self.assertTrue(report['passed'], [name for name, r in records.items() if not r['passed']])
        self.assertLess(records['normal_form.normal_form']['residual'], 1e-10)
        refinement = records['normal_form.refinement']
        self.assertEqual(refinement['kind'], 'refinement')
        self.assertTrue(refinement['passed'])
        self.assertIn('conormal_frame', report['summary'])
        self.assertTrue(any(name.startswith('pullback.') for name in records))

    def test_split_of_symplectic_r4(self):
        report = self.report_of('split', 'symplecticR4', '--steps', '8', '--quad', '4')
        records = self.records_of(report)
        self.assertTrue(report['passed'], [name for name, r in records.items() if not r['passed']])
        self.assertEqual(report['summary']['symplectic_rank'], 4)
        self.assertEqual(report['summary']['transversal_dimension'], 0)
        self.assertIn('split.split_symplectic_block', records)
        self.assertIn('b_map.b_linear_moser', records)
