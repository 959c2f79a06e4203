import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from core.serializers import COMMANDS, read_config, validate_config
from core.services.errors import ConfigError
from core.services.library import builtin_examples, find_example, summarize
from core.services.runner import apply_overrides, run_command

logger = logging.getLogger(__name__)

EXIT_FAIL = 1
EXIT_CONFIG = 2


class Command(BaseCommand):
    help = 'Run a normal-form verification suite on a JSON configuration, or list the built-in examples.'

    def add_arguments(self, parser):
        parser.add_argument('command', choices=COMMANDS + ['list'])
        parser.add_argument('config', nargs='?', help='Path to a configuration, or a built-in example name.')
        parser.add_argument('--out', help='Write the JSON report here instead of standard output.')
        parser.add_argument('--csv', help='Write per-sample residual rows here.')
        parser.add_argument('--steps', type=int, help='Integrator steps on [0, 1].')
        parser.add_argument('--quad', type=int, help='Gauss-Legendre nodes for the averaged form.')
        parser.add_argument('--tol', type=float, help="Tolerance of the command's primary check.")
        parser.add_argument('--seed', type=int, help='Sampler seed.')

    def handle(self, *args, **options):
        command = options['command']
        if command == 'list':
            self.list_examples()
            return

        if not options['config']:
            raise CommandError('A configuration is required.', returncode=EXIT_CONFIG)
        try:
            config = self.load(command, options)
        except ConfigError as e:
            raise CommandError(f'Configuration error: {e}', returncode=EXIT_CONFIG)

        report = run_command(command, config)

        output = config.get('output') or {}
        out_path = options['out'] or output.get('report')
        csv_path = options['csv'] or output.get('csv')
        if out_path:
            report.write_json(out_path)
            self.stdout.write(f'Report written to {out_path}')
        else:
            self.stdout.write(report.to_json())
        if csv_path:
            report.write_csv(csv_path)

        for record in report.records:
            if not record.passed:
                self.stderr.write(f'FAIL {record.name}: residual {record.residual:.3e} '
                                  f'> {record.tolerance:.1e} {record.detail}')
        if not report.passed:
            failed = sum(1 for record in report.records if not record.passed)
            raise CommandError(f'{failed} of {len(report.records)} checks failed.', returncode=EXIT_FAIL)
        self.stdout.write(self.style.SUCCESS(f'{command}: all {len(report.records)} checks passed.'))

    def load(self, command, options):
        """Decode the configuration, apply flag overrides, then validate"""
        path = Path(options['config'])
        if not path.exists():
            path = find_example(options['config'])
        data = read_config(path)
        apply_overrides(data, command, steps=options['steps'], quadrature=options['quad'],
                        tol=options['tol'], seed=options['seed'])
        logger.debug(f'Loaded configuration {path}')
        return validate_config(data, command)

    def list_examples(self):
        try:
            examples = builtin_examples()
        except ConfigError as e:
            raise CommandError(f'Configuration error: {e}', returncode=EXIT_CONFIG)
        for example in examples:
            summary = summarize(example)
            self.stdout.write(
                f"{summary['name']:<16} dim {summary['dimension']:<3} "
                f"transversal {summary['transversal']:<24} group {summary['group']:<8} {summary['description']}"
            )
