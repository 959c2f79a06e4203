# Core services package
from .errors import NormalFormError
from .library import Problem, build_problem, builtin_examples
from .reports import CheckRecord, Report, SuiteResult
from .runner import run_command

__all__ = [
    'NormalFormError', 'Problem', 'build_problem', 'builtin_examples',
    'CheckRecord', 'Report', 'SuiteResult', 'run_command',
]
