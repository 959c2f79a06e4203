"""
Command dispatch: turns a validated run configuration into a Report.

Each command builds the problem objects, draws its samples from the seeded
sampler and runs its verification suites in a fixed order. Errors raised
inside a suite become failing records so one bad sample set never hides the
other results.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional

import numpy as np
from django.conf import settings

from normal_form import __version__
from core.services.equivariant import check_b_map, weinstein_split
from core.services.errors import ConfigError, NormalFormError
from core.services.expressions import ChartBox, ExpressionField
from core.services.fields import jacobiator_residuals
from core.services.library import Problem, build_problem
from core.services.moser import (
    GaugePath, MoserField, check_moser, check_primitive, linear_extension,
    verify_extension_independence,
)
from core.services.reports import (
    CheckRecord, Report, ResidualRow, SuiteResult, config_digest, refinement_record, worst,
)
from core.services.sampling import SampleGenerator
from core.services.spray import (
    SprayField, check_dual_pair_dirac, check_realization, check_restricted_dual_pair,
    check_self_dual_pair, check_spray_axioms, check_zero_section_differential,
    check_zero_section_formula, flat_spray, probe_realization_radius, pushforward_residuals,
)
from core.services.transversal import (
    ChartMap, ConormalChart, SigmaTable, TransversalData, check_model_consistency,
    check_pullback_transversal, check_transversal, check_transversal_suite, conormal_chart, verify_normal_form,
)

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCES = {
    "jacobi": 1e-9,
    "realization": 1e-5,
    "closedness": 1e-4,
    "dual_pair": 1e-5,
    "orthogonality": 1e-6,
    "normal_form": 1e-4,
    "identity": 1e-10,
    "moser": 1e-5,
    "extension": 1e-4,
    "split": 1e-4,
    "group": 1e-8,
}

# The tolerance a bare --tol flag overrides, per command.
PRIMARY_TOLERANCE = {
    "check-jacobi": "jacobi",
    "realize": "realization",
    "dual-pair": "dual_pair",
    "normal-form": "normal_form",
    "moser": "moser",
    "split": "split",
}

# Jacobiator certification draws at least this many points.
JACOBI_SAMPLES = 100

# Per-sample cost caps for the expensive suites.
DIRAC_SAMPLES = 10
CONSISTENCY_SAMPLES = 5
RESTRICTED_SAMPLES = 5
EXTENSION_SAMPLES = 4
PRIMITIVE_SAMPLES = 4
PULLBACK_ELEMENTS = 3
SPLIT_SAMPLES = 4


@dataclass
class RunSettings:
    """Numerical parameters of one run, config values over settings defaults."""
    steps: int
    quadrature: int
    fiber_radius: float
    moser_steps: int
    primitive_nodes: int
    fd_step: float
    count: int
    seed: int
    base_radius: Optional[float]
    tolerances: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "RunSettings":
        flow = config.get("flow") or {}
        samples = config.get("samples") or {}
        tolerances = dict(DEFAULT_TOLERANCES)
        tolerances.update(config.get("tolerances") or {})
        return cls(
            steps=flow.get("steps", settings.PNF_DEFAULT_STEPS),
            quadrature=flow.get("quadrature", settings.PNF_DEFAULT_QUADRATURE),
            fiber_radius=flow.get("fiber_radius", 0.5),
            moser_steps=flow.get("moser_steps", 8),
            primitive_nodes=flow.get("primitive_nodes", 8),
            fd_step=flow.get("fd_step", settings.PNF_FD_STEP),
            count=samples.get("count", 0),
            seed=samples.get("seed") or 0,
            base_radius=samples.get("base_radius"),
            tolerances=tolerances,
        )

    def tol(self, name: str) -> float:
        return self.tolerances[name]

    def as_summary(self) -> Dict[str, Any]:
        return {
            "steps": self.steps,
            "quadrature": self.quadrature,
            "fiber_radius": self.fiber_radius,
            "samples": self.count,
            "seed": self.seed,
        }


def apply_overrides(data: Dict[str, Any], command: str, steps: Optional[int] = None,
                    quadrature: Optional[int] = None, tol: Optional[float] = None,
                    seed: Optional[int] = None) -> Dict[str, Any]:
    """Write command-line flag values into a decoded (not yet validated) configuration."""
    def section(name):
        value = data.setdefault(name, {})
        return value if isinstance(value, dict) else {}

    if steps is not None:
        section("flow")["steps"] = steps
    if quadrature is not None:
        section("flow")["quadrature"] = quadrature
    if seed is not None:
        section("samples")["seed"] = seed
    if tol is not None and command in PRIMARY_TOLERANCE:
        section("tolerances")[PRIMARY_TOLERANCE[command]] = tol
    return data


def failure_suite(error: NormalFormError, name: str = "error") -> SuiteResult:
    return SuiteResult([CheckRecord(name, float("inf"), 0.0, passed=False,
                                    detail=f"{type(error).__name__}: {error}")])


def run_suite(report: Report, prefix: str, fn: Callable[..., SuiteResult], *args, **kwargs) -> Optional[SuiteResult]:
    """Run one suite into the report; a raised toolkit error becomes a failing record."""
    try:
        suite = fn(*args, **kwargs)
    except NormalFormError as e:
        logger.warning(f"Suite {prefix!r} failed: {type(e).__name__}: {e}")
        report.add(failure_suite(e), prefix)
        return None
    report.add(suite, prefix)
    return suite


def _base_radius(problem: Problem, rs: RunSettings) -> float:
    if rs.base_radius is not None:
        return rs.base_radius
    return 0.5 * float(np.min(problem.box.upper - problem.box.lower)) / 2.0


def _cotangent_samples(problem: Problem, rs: RunSettings, sampler: SampleGenerator) -> np.ndarray:
    points = sampler.in_ball_within(problem.box, _base_radius(problem, rs), rs.count)
    covectors = sampler.in_ball(np.zeros(problem.dimension), rs.fiber_radius, rs.count)
    return np.hstack([points, covectors])


def _spray(problem: Problem, rs: RunSettings) -> SprayField:
    return flat_spray(problem.bivector, 2.0 * rs.fiber_radius)


def _conormal_samples(td: TransversalData, count: int, radius: float, sampler: SampleGenerator) -> np.ndarray:
    k, r = td.parameter_dimension, td.codimension
    params = sampler.in_box(td.embedding.source, count, 0.9) if k else np.zeros((count, 0))
    fibers = sampler.in_ball(np.zeros(r), radius, count) if r else np.zeros((count, 0))
    return np.hstack([params, fibers])


def _transversal(problem: Problem, rs: RunSettings, sampler: SampleGenerator):
    """Checked transversal data and its conormal chart; raises on failure."""
    e = problem.embedding
    params = sampler.in_box(e.source, max(rs.count, 1), 0.9) if e.parameter_dimension else np.zeros((1, 0))
    td = check_transversal(problem.bivector, e, params)
    return td, conormal_chart(td, rs.fiber_radius), params


def _sigma(s: SprayField, cc: ConormalChart, rs: RunSettings) -> Callable:
    return SigmaTable(s, cc, rs.quadrature, rs.steps).matrices


# Commands

def run_check_jacobi(problem: Problem, rs: RunSettings, report: Report) -> None:
    sampler = SampleGenerator(rs.seed)
    points = sampler.in_box(problem.box, max(rs.count, JACOBI_SAMPLES))
    report.summary["jacobi_samples"] = len(points)

    def jacobi() -> SuiteResult:
        residuals = jacobiator_residuals(problem.bivector, points)
        rows = [ResidualRow(b, list(x), [], "jacobiator", residuals[b]) for b, x in enumerate(points)]
        return SuiteResult([CheckRecord("jacobiator", worst(residuals), rs.tol("jacobi"))], rows)

    suite = run_suite(report, "jacobi", jacobi)
    if suite is not None:
        report.summary["max_jacobiator"] = suite.records[0].residual
    if problem.group is not None:
        def group() -> SuiteResult:
            return SuiteResult([
                CheckRecord("closure", problem.group.check_closure(), rs.tol("group")),
                CheckRecord("invariance", problem.group.invariance_residual(problem.bivector, points[:10]),
                            rs.tol("group")),
            ])
        run_suite(report, "group", group)


def run_realize(problem: Problem, rs: RunSettings, report: Report) -> None:
    sampler = SampleGenerator(rs.seed)
    samples = _cotangent_samples(problem, rs, sampler)
    n = problem.dimension
    s = _spray(problem, rs)

    run_suite(report, "spray", check_spray_axioms, s, samples)
    run_suite(report, "zero_section", check_zero_section_formula, s, samples[:, :n], rs.quadrature, rs.steps)

    def zero_section_differential() -> SuiteResult:
        residuals = [check_zero_section_differential(s, x, 1.0, rs.steps) for x in samples[:DIRAC_SAMPLES, :n]]
        return SuiteResult([CheckRecord("differential", worst(residuals), 1e-10)])

    run_suite(report, "zero_section", zero_section_differential)
    run_suite(report, "realization", check_realization, s, samples, rs.tol("realization"), rs.quadrature,
              rs.steps, closed_tol=rs.tol("closedness"), h=rs.fd_step)

    def refinement() -> SuiteResult:
        coarse = worst(pushforward_residuals(s, samples, rs.quadrature, rs.steps))
        fine = worst(pushforward_residuals(s, samples, rs.quadrature, 2 * rs.steps))
        return SuiteResult([refinement_record("pushforward_refinement", coarse, fine, rs.steps)])

    run_suite(report, "realization", refinement)
    directions = sampler.normal((min(rs.count, 5), n))
    try:
        report.summary["probed_radius"] = probe_realization_radius(
            s, samples[: len(directions), :n], directions, rs.fiber_radius * np.array([0.5, 1.0, 1.5, 2.0]),
            rs.quadrature, rs.steps,
        )
    except NormalFormError as e:
        logger.warning(f"Radius probe failed: {e}")


def run_dual_pair(problem: Problem, rs: RunSettings, report: Report) -> None:
    sampler = SampleGenerator(rs.seed)
    samples = _cotangent_samples(problem, rs, sampler)
    s = _spray(problem, rs)
    run_suite(report, "dual_pair", check_self_dual_pair, s, samples, rs.tol("dual_pair"), rs.quadrature,
              rs.steps, orthogonality_tol=rs.tol("orthogonality"))
    run_suite(report, "dual_pair", check_dual_pair_dirac, s, samples[:DIRAC_SAMPLES], rs.tol("orthogonality"),
              rs.quadrature, rs.steps)
    if problem.embedding is None:
        return
    try:
        td, _, _ = _transversal(problem, rs, sampler)
    except NormalFormError as e:
        report.add(failure_suite(e), "restricted")
        return
    chart_points = _conormal_samples(td, min(rs.count, RESTRICTED_SAMPLES), 0.5 * rs.fiber_radius, sampler)
    run_suite(report, "restricted", check_restricted_dual_pair, s, td, td, chart_points,
              nodes=rs.quadrature, steps=rs.steps)


def _group_maps(problem: Problem, td: TransversalData, params: np.ndarray):
    """Non-identity group elements as chart maps, with source points whose image lies on X."""
    action = problem.group
    x0 = action.fixed_point
    points = td.embedding.evaluate(params)
    for index, (g, g_inverse) in enumerate(zip(action.matrices, action.inverses)):
        if np.allclose(g, np.eye(action.dimension)):
            continue
        offset = x0 - g @ x0
        components = [ExpressionField.affine(offset[i], g[i], problem.box) for i in range(problem.dimension)]
        phi = ChartMap(problem.box, components, problem.box, f"g{index}")
        yield phi, x0 + (points - x0) @ g_inverse.T


def run_normal_form(problem: Problem, rs: RunSettings, report: Report) -> None:
    sampler = SampleGenerator(rs.seed)
    pi = problem.bivector
    try:
        td, cc, params = _transversal(problem, rs, sampler)
    except NormalFormError as e:
        report.add(failure_suite(e), "transversal")
        return
    report.summary["conormal_frame"] = "reference coframe: pivoted QR at the parameter box center"
    run_suite(report, "transversal", check_transversal_suite, pi, td, params, rs.fd_step)
    s = _spray(problem, rs)
    samples = _conormal_samples(td, rs.count, rs.fiber_radius, sampler)

    coarse = run_suite(report, "normal_form", verify_normal_form, pi, td, cc, s, samples,
                       rs.tol("normal_form"), rs.quadrature, rs.steps, rs.tol("identity"))
    if coarse is not None:
        record = coarse.record("normal_form.normal_form")
        report.summary["probed_radius"] = record.probed_radius

        def refinement() -> SuiteResult:
            fine = verify_normal_form(pi, td, cc, s, samples, rs.tol("normal_form"), rs.quadrature,
                                      2 * rs.steps, rs.tol("identity"))
            return SuiteResult([refinement_record("refinement", record.residual,
                                                  fine.record("normal_form").residual, rs.steps)])
        run_suite(report, "normal_form", refinement)

    run_suite(report, "model", check_model_consistency, td, cc, _sigma(s, cc, rs), samples[:CONSISTENCY_SAMPLES])

    if problem.group is not None and not problem.group.is_trivial:
        probe = params[:CONSISTENCY_SAMPLES]
        for count, (phi, points) in enumerate(_group_maps(problem, td, probe)):
            if count == PULLBACK_ELEMENTS:
                break
            run_suite(report, f"pullback.{phi.name}", check_pullback_transversal, phi, pi.matrix, pi, td, points,
                      rs.tol("group"))


def run_moser(problem: Problem, rs: RunSettings, report: Report) -> None:
    sampler = SampleGenerator(rs.seed)
    moser = problem.config["moser"]
    if problem.alpha is not None:
        points = np.asarray(moser["points"], dtype=float) if moser.get("points") \
            else sampler.in_box(problem.box, max(rs.count, 1), 0.5)

        def gauge() -> SuiteResult:
            return check_moser(MoserField(GaugePath(problem.bivector, problem.alpha)), points,
                               rs.tol("moser"), rs.steps)
        run_suite(report, "gauge", gauge)

    if moser.get("extension"):
        try:
            td, cc, _ = _transversal(problem, rs, sampler)
        except NormalFormError as e:
            report.add(failure_suite(e), "extension")
            return
        s = _spray(problem, rs)
        sigma_a = _sigma(s, cc, rs)
        sigma_b = linear_extension(td)
        samples = _conormal_samples(td, max(min(rs.count, EXTENSION_SAMPLES), 1), 0.75 * rs.fiber_radius, sampler)

        def difference(points):
            return sigma_b(points) - sigma_a(points)

        run_suite(report, "primitive", check_primitive, difference, td.parameter_dimension,
                  samples[:PRIMITIVE_SAMPLES], rs.primitive_nodes, rs.fd_step)
        run_suite(report, "extension", verify_extension_independence, td, cc, sigma_a, sigma_b, samples,
                  rs.tol("extension"), rs.primitive_nodes, rs.moser_steps, rs.fd_step)


def run_split(problem: Problem, rs: RunSettings, report: Report) -> None:
    sampler = SampleGenerator(rs.seed)
    options = problem.config["split"]
    point = np.asarray(options["point"], dtype=float)
    radius, half_width = options.get("fiber_radius", 0.1), options.get("half_width", 0.1)
    try:
        split = weinstein_split(
            problem.bivector, point, problem.group, radius, half_width, rs.quadrature, rs.steps,
            rs.moser_steps, rs.primitive_nodes, rs.fd_step,
            check_points=sampler.in_ball_within(problem.box, half_width, 4, point),
        )
    except NormalFormError as e:
        report.add(failure_suite(e), "split")
    else:
        report.add(SuiteResult(split.records), "split")
        bounds = ((-radius, radius),) * split.rank + (split.td.embedding.source.bounds if split.k else ())
        samples = sampler.in_box(ChartBox("split samples", bounds), min(max(rs.count, 1), SPLIT_SAMPLES), 0.5)
        run_suite(report, "split", split.verify, samples, rs.tol("split"), rs.tol("group"))
        report.summary["symplectic_rank"] = split.rank
        report.summary["transversal_dimension"] = split.k
    if options.get("b_trials", 20):
        run_suite(report, "b_map", check_b_map, sampler, (2, 4, 6), options.get("b_trials", 20))


COMMANDS: Dict[str, Callable[[Problem, RunSettings, Report], None]] = {
    "check-jacobi": run_check_jacobi,
    "realize": run_realize,
    "dual-pair": run_dual_pair,
    "normal-form": run_normal_form,
    "moser": run_moser,
    "split": run_split,
}


def run_command(command: str, config: Dict[str, Any]) -> Report:
    """
    Run one command on a validated configuration.

    Raises:
        ConfigError: For an unknown command. Toolkit errors inside the run
            are recorded, not raised.
    """
    handler = COMMANDS.get(command)
    if handler is None:
        raise ConfigError(f"Unknown command {command!r}", errors={"command": sorted(COMMANDS)})
    started = time.perf_counter()
    rs = RunSettings.from_config(config)
    report = Report(command, config["name"], config_digest(config), __version__)
    report.summary.update(rs.as_summary())
    logger.info(f"Running {command} on {config['name']!r} (steps {rs.steps}, quadrature {rs.quadrature})")
    try:
        problem = build_problem(config)
    except NormalFormError as e:
        report.add(failure_suite(e), "setup")
    else:
        handler(problem, rs, report)
    report.timing = {"seconds": round(time.perf_counter() - started, 3)}
    logger.info(f"{command} on {config['name']!r}: {'pass' if report.passed else 'fail'} "
                f"({len(report.records)} records, {report.timing['seconds']} s)")
    return report
