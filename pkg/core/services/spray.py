"""
Poisson sprays on the cotangent chart, geodesic flows and the averaged
symplectic form Ω_𝒳, with the realization and dual-pair checks.

States are (x, ξ) pairs stored as rows of length 2n. The canonical form is

    ω_can((Y₁,η₁),(Y₂,η₂)) = η₁(Y₂) − η₂(Y₁)

whose matrix in (x, ξ) order is W = [[0, −I], [I, 0]]. Along the zero
section Ω_𝒳 = [[0, −I], [I, π]], so p: Σ → (M, π) and exp: Σ → (M, −π)
are Poisson with respect to Ω_𝒳^{-1}.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import least_squares

from core.services.dirac import dirac_gauge, dirac_graph_matrix, dirac_pullback
from core.services.errors import DomainEscape, NormalFormError, NotOnTransversal, SingularGauge
from core.services.expressions import ChartBox
from core.services.fields import BivectorField, exterior_derivative_numeric
from core.services.integrators import FlowBatch, gauss_legendre, guarded, integrate
from core.services.reports import (
    CheckRecord, ResidualRow, SuiteResult, failure_detail, ordered_map, probed_radius, worst,
)

logger = logging.getLogger(__name__)

# Ω counts as degenerate beyond this condition number.
OMEGA_CONDITION_CAP = 1e10


def canonical_form(n: int) -> np.ndarray:
    """Matrix W of ω_can in (x, ξ) coordinates."""
    eye, zero = np.eye(n), np.zeros((n, n))
    return np.block([[zero, -eye], [eye, zero]])


def zero_section_omega(pi: np.ndarray) -> np.ndarray:
    """Ω_𝒳 at (x, 0): η₁(Y₂) − η₂(Y₁) + π(η₁, η₂)."""
    pi = np.asarray(pi, dtype=float)
    n = pi.shape[-1]
    eye, zero = np.eye(n), np.zeros((n, n))
    return np.block([[zero, -eye], [eye, pi]])


@dataclass(frozen=True)
class CotangentChart:
    """Cotangent coordinates (x, ξ) over a base box with |ξ| ≤ fiber_bound."""
    base: ChartBox
    fiber_bound: float

    def __post_init__(self):
        if not (self.fiber_bound > 0.0 and np.isfinite(self.fiber_bound)):
            raise NormalFormError(f"Fibre bound must be positive and finite, got {self.fiber_bound}")

    @property
    def dimension(self) -> int:
        return self.base.dimension

    @property
    def box(self) -> ChartBox:
        """Total coordinates as a box (the fibre ball inscribed in it)."""
        rho = float(self.fiber_bound)
        return ChartBox(f"T*{self.base.name}", self.base.bounds + ((-rho, rho),) * self.dimension)

    def contains(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        n = self.dimension
        in_base = self.base.contains(states[:, :n])
        in_fiber = np.linalg.norm(states[:, n:], axis=1) <= self.fiber_bound * (1.0 + 1e-12)
        return in_base & in_fiber


class SprayField:
    """
    Poisson spray 𝒳(x, ξ) = (π(x)ξ, Γ(ξ, ξ)).

    The flat spray has Γ = 0. A constant vertical quadratic term Γ (shape
    (n, n, n), (Γ(ξ,ξ))_i = Γ_ijk ξ_j ξ_k) keeps both spray axioms and is
    what group averaging acts on.
    """

    def __init__(self, bivector: BivectorField, chart: CotangentChart,
                 quadratic: Optional[np.ndarray] = None, name: str = ""):
        n = bivector.dimension
        if chart.dimension != n:
            raise NormalFormError("Cotangent chart and bivector dimensions differ")
        if quadratic is not None:
            quadratic = np.asarray(quadratic, dtype=float)
            if quadratic.shape != (n, n, n):
                raise NormalFormError(f"Quadratic term must have shape {(n, n, n)}")
            if not np.any(quadratic):
                quadratic = None
        self.bivector = bivector
        self.chart = chart
        self.quadratic = quadratic
        self.name = name or bivector.name

    @property
    def dimension(self) -> int:
        return self.bivector.dimension

    @property
    def is_flat(self) -> bool:
        return self.quadratic is None

    def negated(self) -> "SprayField":
        """The spray −𝒳, a spray for −π."""
        quadratic = None if self.quadratic is None else -self.quadratic
        return SprayField(self.bivector.negated(), self.chart, quadratic, f"-{self.name}")

    def evaluate(self, states: np.ndarray, with_jacobian: bool = True):
        """Field values (B, 2n) and Jacobians (B, 2n, 2n) at states inside the chart."""
        n = self.dimension
        x, xi = states[:, :n], states[:, n:]
        values_pi, grads_pi, _ = self.bivector.jet(x, order=1 if with_jacobian else 0)
        values = np.zeros_like(states)
        values[:, :n] = np.einsum("bij,bj->bi", values_pi, xi)
        if self.quadratic is not None:
            values[:, n:] = np.einsum("ijk,bj,bk->bi", self.quadratic, xi, xi)
        if not with_jacobian:
            return values, None
        jacobians = np.zeros((states.shape[0], 2 * n, 2 * n))
        jacobians[:, :n, :n] = np.einsum("bijl,bj->bil", grads_pi, xi)
        jacobians[:, :n, n:] = values_pi
        if self.quadratic is not None:
            symmetric = self.quadratic + np.swapaxes(self.quadratic, 1, 2)
            jacobians[:, n:, n:] = np.einsum("ijk,bk->bij", symmetric, xi)
        return values, jacobians

    def vector_field(self):
        return guarded(lambda t, s, jac: self.evaluate(s, jac), self.chart.contains)

    def __repr__(self) -> str:
        return f"SprayField({self.name!r}, flat={self.is_flat})"


def flat_spray(pi: BivectorField, fiber_bound: float = 1.0, base: Optional[ChartBox] = None) -> SprayField:
    """Horizontal lift of π♯ for the flat connection of the chart."""
    chart = CotangentChart(base or pi.box, fiber_bound)
    return SprayField(pi, chart, None, pi.name)


@dataclass
class FlowResult:
    """
    Geodesic flow from one state.

    Attributes:
        state: End state (x, ξ).
        jacobian: 2n×2n derivative of the flow map.
        steps: Step count used.
        escaped: True when the trajectory left the chart.
        escape_time: Time of the last valid state before escaping.
        escape_location: That last valid state.
    """
    state: np.ndarray
    jacobian: Optional[np.ndarray]
    steps: int
    escaped: bool = False
    escape_time: Optional[float] = None
    escape_location: Optional[np.ndarray] = None


def flow_states(s: SprayField, states, t, steps: int = 64, with_jacobian: bool = True) -> FlowBatch:
    """Geodesic flow of a batch of states to times t (scalar or per state)."""
    states = np.array(states, dtype=float, ndmin=2)
    return integrate(s.vector_field(), states, 0.0, t, steps, with_jacobian, s.chart.contains)


def _escape(batch: FlowBatch, index: int, what: str) -> DomainEscape:
    location = batch.escape_locations[index]
    return DomainEscape(
        f"{what} left the chart at t={batch.escape_times[index]:.6g}, "
        f"state {np.array2string(location, precision=6)}",
        time=float(batch.escape_times[index]),
        location=location.tolist(),
    )


def geodesic_flow(s: SprayField, state, t: float, steps: int = 64) -> FlowResult:
    """
    Time-t geodesic flow with its Jacobian.

    Raises:
        DomainEscape: If the trajectory leaves the cotangent chart.
    """
    batch = flow_states(s, state, t, steps)
    if not batch.alive[0]:
        raise _escape(batch, 0, "Geodesic")
    return FlowResult(batch.states[0], batch.jacobians[0], steps)


def contravariant_exp(s: SprayField, state, steps: int = 64) -> np.ndarray:
    """Base projection of the time-one geodesic flow."""
    return geodesic_flow(s, state, 1.0, steps).state[: s.dimension]


def _constant_omega_batch(s: SprayField, states: np.ndarray):
    """
    Ω_𝒳 of the flat spray of a constant π, without flows.

    The flow is (x + tπξ, ξ), so (φᵗ)*ω_can = [[0, −I], [I, 2tπ]] and its
    average is the zero-section matrix everywhere. The base path is a
    segment, so it stays in the box when both ends do.
    """
    n = s.dimension
    pi = s.bivector.at(s.chart.base.center)
    ends = states.copy()
    ends[:, :n] += states[:, n:] @ pi.T
    alive = s.chart.contains(states) & s.chart.contains(ends)
    omegas = np.tile(zero_section_omega(pi), (states.shape[0], 1, 1))
    omegas[~alive] = np.nan
    return omegas, alive


def omega_batch(s: SprayField, states, nodes: int = 16, steps: int = 64):
    """
    Ω_𝒳 at a batch of states by K-node Gauss–Legendre quadrature of (φᵗ)*ω_can.

    Returns:
        (omegas (B, 2n, 2n), alive (B,)); omegas of failed members are NaN.
    """
    states = np.array(states, dtype=float, ndmin=2)
    batch, d = states.shape
    if s.is_flat and s.bivector.is_constant:
        return _constant_omega_batch(s, states)
    t, w = gauss_legendre(nodes)
    repeated = np.repeat(states, nodes, axis=0)
    times = np.tile(t, batch)
    flows = flow_states(s, repeated, times, steps)
    jacobians = flows.jacobians.reshape(batch, nodes, d, d)
    omegas = np.einsum("k,bkji,jl,bklm->bim", w, jacobians, canonical_form(d // 2), jacobians)
    alive = flows.alive.reshape(batch, nodes).all(axis=1)
    omegas[~alive] = np.nan
    return 0.5 * (omegas - np.swapaxes(omegas, 1, 2)), alive


def omega_spray(s: SprayField, z, nodes: int = 16, steps: int = 64) -> np.ndarray:
    """
    Ω_𝒳(z), antisymmetric 2n×2n.

    Raises:
        DomainEscape: If some quadrature trajectory leaves the chart.
    """
    z = np.asarray(z, dtype=float)
    omegas, alive = omega_batch(s, z, nodes, steps)
    if not alive[0]:
        raise DomainEscape(f"Flow from {np.array2string(z, precision=6)} leaves the chart before t=1",
                           location=z.tolist())
    return omegas[0]


def omega_function(s: SprayField, nodes: int, steps: int):
    """z-batch ↦ Ω_𝒳, raising DomainEscape on any failure (for finite-difference stencils)."""
    def evaluate(states):
        omegas, alive = omega_batch(s, states, nodes, steps)
        if not np.all(alive):
            bad = states[int(np.argmin(alive))]
            raise DomainEscape(f"Flow from {np.array2string(bad, precision=6)} leaves the chart",
                               location=bad.tolist())
        return omegas
    return evaluate


def check_spray_axioms(s: SprayField, states, scales: Sequence[float] = (0.5, 2.0)) -> SuiteResult:
    """Projection p_*𝒳 = π♯ξ and fibre homogeneity (degree 1 base, degree 2 fibre)."""
    states = np.array(states, dtype=float, ndmin=2)
    n = s.dimension
    values, _ = s.evaluate(states, with_jacobian=False)
    expected = np.einsum("bij,bj->bi", s.bivector.matrix(states[:, :n]), states[:, n:])
    projection = np.max(np.abs(values[:, :n] - expected), axis=1, initial=0.0)
    homogeneity = np.zeros(states.shape[0])
    for scale in scales:
        scaled = np.hstack([states[:, :n], scale * states[:, n:]])
        v_scaled, _ = s.evaluate(scaled, with_jacobian=False)
        base = np.abs(v_scaled[:, :n] - scale * values[:, :n])
        fiber = np.abs(v_scaled[:, n:] - scale**2 * values[:, n:])
        homogeneity = np.maximum(homogeneity, np.max(np.hstack([base, fiber]), axis=1, initial=0.0))
    return SuiteResult([
        CheckRecord("projection", worst(projection), 1e-12),
        CheckRecord("homogeneity", worst(homogeneity), 1e-12),
    ])


def check_zero_section_formula(s: SprayField, points, nodes: int = 16, steps: int = 64,
                               tol: float = 1e-10) -> SuiteResult:
    """Ω_𝒳 at (x, 0) against [[0, −I], [I, π(x)]]."""
    points = np.array(points, dtype=float, ndmin=2)
    states = np.hstack([points, np.zeros_like(points)])
    omegas, alive = omega_batch(s, states, nodes, steps)
    expected = np.stack([zero_section_omega(p) for p in s.bivector.matrix(points)])
    residuals = np.where(alive, np.max(np.abs(omegas - expected), axis=(1, 2), initial=0.0), np.inf)
    rows = [ResidualRow(i, list(x), [0.0] * s.dimension, "zero_section", r)
            for i, (x, r) in enumerate(zip(points, residuals))]
    return SuiteResult([CheckRecord("zero_section", worst(residuals), tol)], rows)


def check_zero_section_differential(s: SprayField, x, t: float, steps: int = 64) -> float:
    """|dφᵗ(x, 0) − [[I, tπ(x)], [0, I]]|, the flow differential along the zero section."""
    x = np.asarray(x, dtype=float)
    n = s.dimension
    result = geodesic_flow(s, np.concatenate([x, np.zeros(n)]), t, steps)
    expected = np.eye(2 * n)
    expected[:n, n:] = t * s.bivector.at(x)
    return float(np.max(np.abs(result.jacobian - expected)))


def _fiber_radii(states: np.ndarray, n: int) -> np.ndarray:
    return np.linalg.norm(states[:, n:], axis=1)


def check_realization(s: SprayField, samples, tol: float = 1e-5, nodes: int = 16, steps: int = 64,
                      closed_tol: float = 1e-4, h: float = 1e-5, threads: Optional[int] = None) -> SuiteResult:
    """
    Symplectic realization checks at each sample state.

    Verifies that Ω_𝒳 is antisymmetric and invertible, numerically closed,
    and that dp·Ω^{-1}·dpᵀ = π(x). Samples whose flows leave the chart are
    recorded as failures without stopping the batch.
    """
    samples = np.array(samples, dtype=float, ndmin=2)
    n = s.dimension
    omegas, alive = omega_batch(s, samples, nodes, steps)
    pis = s.bivector.matrix(samples[:, :n])
    errors: Dict[int, Exception] = {}
    pushforward = np.full(len(samples), np.inf)
    condition = np.full(len(samples), np.inf)
    for b in np.flatnonzero(alive):
        condition[b] = np.linalg.cond(omegas[b])
        if condition[b] > OMEGA_CONDITION_CAP:
            errors[b] = NormalFormError(f"Ω is degenerate (condition {condition[b]:.3e})")
            continue
        inverse = np.linalg.inv(omegas[b])
        pushforward[b] = np.max(np.abs(inverse[:n, :n] - pis[b]))
    for b in np.flatnonzero(~alive):
        errors[b] = DomainEscape("Flow left the chart before t=1", location=samples[b].tolist())

    def closedness(b: int) -> float:
        try:
            d_omega = exterior_derivative_numeric(omega_function(s, nodes, steps), samples[b], h)
        except (DomainEscape, SingularGauge) as e:
            logger.warning(f"Closedness stencil failed at sample {b}: {e}")
            return float("inf")
        return float(np.max(np.abs(d_omega)))

    closed = np.full(len(samples), np.inf)
    good = [int(b) for b in np.flatnonzero(alive)]
    closed[good] = ordered_map(closedness, good, threads)

    ok = np.isfinite(pushforward)
    radius = probed_radius(_fiber_radii(samples, n), ok)
    detail = failure_detail(errors)
    rows = []
    for b, z in enumerate(samples):
        rows.append(ResidualRow(b, list(z[:n]), list(z[n:]), "pushforward", pushforward[b]))
        rows.append(ResidualRow(b, list(z[:n]), list(z[n:]), "closedness", closed[b]))
    records = [
        CheckRecord("invertibility", worst(condition), OMEGA_CONDITION_CAP, detail=detail),
        CheckRecord("closedness", worst(closed), closed_tol, detail=detail),
        CheckRecord("pushforward", worst(pushforward), tol, probed_radius=radius, detail=detail),
    ]
    logger.info(f"Realization of {s.name!r}: pushforward {records[-1].residual:.3e}, "
                f"closedness {records[1].residual:.3e}")
    return SuiteResult(records, rows)


def pushforward_residuals(s: SprayField, samples, nodes: int = 16, steps: int = 64) -> np.ndarray:
    """|dp·Ω_𝒳^{-1}·dpᵀ − π| per sample, inf where a flow escapes or Ω is degenerate."""
    samples = np.array(samples, dtype=float, ndmin=2)
    n = s.dimension
    omegas, alive = omega_batch(s, samples, nodes, steps)
    residual = np.full(len(samples), np.inf)
    good = np.flatnonzero(alive)
    good = good[np.linalg.cond(omegas[good]) <= OMEGA_CONDITION_CAP] if good.size else good
    if good.size:
        inverse = np.linalg.inv(omegas[good])
        residual[good] = np.max(np.abs(inverse[:, :n, :n] - s.bivector.matrix(samples[good, :n])), axis=(1, 2))
    return residual


def exp_batch(s: SprayField, states, steps: int = 64) -> FlowBatch:
    """Time-one flows of a batch, with Jacobians (d exp is the top n rows)."""
    return flow_states(s, states, 1.0, steps)


def check_self_dual_pair(s: SprayField, samples, tol: float = 1e-5, nodes: int = 16, steps: int = 64,
                         orthogonality_tol: float = 1e-6, pullback_tol: float = 1e-6) -> SuiteResult:
    """
    Self-dual pair (M, π) ←p (Σ, Ω_𝒳) →exp (M, −π).

    Checks d(exp)·Ω^{-1}·d(exp)ᵀ = −π(exp z), Ω-orthogonality of ker dp and
    ker d(exp), and the pullback identity (φ¹)*Ω_{−𝒳} = Ω_𝒳.
    """
    samples = np.array(samples, dtype=float, ndmin=2)
    n = s.dimension
    omegas, alive = omega_batch(s, samples, nodes, steps)
    flows = exp_batch(s, samples, steps)
    alive &= flows.alive
    ends = flows.states
    back_omegas, back_alive = omega_batch(s.negated(), np.where(alive[:, None], ends, samples), nodes, steps)
    alive &= back_alive

    pushforward = np.full(len(samples), np.inf)
    orthogonality = np.full(len(samples), np.inf)
    pullback = np.full(len(samples), np.inf)
    errors = {}
    vertical = np.vstack([np.zeros((n, n)), np.eye(n)])
    for b in range(len(samples)):
        if not alive[b]:
            errors[b] = DomainEscape("Flow left the chart before t=1", location=samples[b].tolist())
            continue
        omega = omegas[b]
        if np.linalg.cond(omega) > OMEGA_CONDITION_CAP:
            errors[b] = NormalFormError("Ω is degenerate")
            continue
        jacobian = flows.jacobians[b]
        d_exp = jacobian[:n]
        target = s.bivector.at(ends[b, :n])
        pushforward[b] = np.max(np.abs(d_exp @ np.linalg.inv(omega) @ d_exp.T + target))
        kernel = null_space(d_exp)
        scale = np.linalg.norm(omega, 2)
        orthogonality[b] = np.max(np.abs(vertical.T @ omega @ kernel), initial=0.0) / scale
        pulled = jacobian.T @ back_omegas[b] @ jacobian
        pullback[b] = np.max(np.abs(pulled - omega))

    ok = np.isfinite(pushforward)
    radius = probed_radius(_fiber_radii(samples, n), ok)
    detail = failure_detail(errors)
    rows = []
    for b, z in enumerate(samples):
        rows.append(ResidualRow(b, list(z[:n]), list(z[n:]), "exp_pushforward", pushforward[b]))
        rows.append(ResidualRow(b, list(z[:n]), list(z[n:]), "orthogonality", orthogonality[b]))
    return SuiteResult([
        CheckRecord("exp_pushforward", worst(pushforward), tol, probed_radius=radius, detail=detail),
        CheckRecord("orthogonality", worst(orthogonality), orthogonality_tol, detail=detail),
        CheckRecord("pullback_consistency", worst(pullback), pullback_tol, detail=detail),
    ], rows)


def check_dual_pair_dirac(s: SprayField, samples, tol: float = 1e-6, nodes: int = 16,
                          steps: int = 64) -> SuiteResult:
    """
    Dirac form of the dual pair: p*(L_π) gauged by −Ω_𝒳 equals exp*(L_π).

    Frames are compared by the sine of their largest principal angle.
    """
    samples = np.array(samples, dtype=float, ndmin=2)
    n = s.dimension
    omegas, alive = omega_batch(s, samples, nodes, steps)
    flows = exp_batch(s, samples, steps)
    alive &= flows.alive
    projection = np.hstack([np.eye(n), np.zeros((n, n))])
    distances = np.full(len(samples), np.inf)
    errors = {}
    for b in np.flatnonzero(alive):
        z = samples[b]
        try:
            source = dirac_pullback(dirac_graph_matrix(s.bivector.at(z[:n])), projection, z)
            gauged = dirac_gauge(source, -omegas[b])
            target = dirac_pullback(dirac_graph_matrix(s.bivector.at(flows.states[b, :n])),
                                    flows.jacobians[b][:n], z)
        except NormalFormError as e:
            errors[int(b)] = e
            continue
        distances[b] = gauged.distance(target)
    return SuiteResult([CheckRecord("dual_pair_dirac", worst(distances), tol,
                                    detail=failure_detail(errors))])


def probe_realization_radius(s: SprayField, points, directions, radii, nodes: int = 16,
                             steps: int = 64) -> float:
    """
    Largest radius ρ (from an increasing list) at which every state (x, ρu)
    keeps its flows in the chart and has invertible Ω_𝒳.
    """
    points = np.array(points, dtype=float, ndmin=2)
    directions = np.array(directions, dtype=float, ndmin=2)
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    best = 0.0
    for rho in sorted(radii):
        states = np.hstack([points, rho * directions])
        if not np.all(s.chart.contains(states)):
            break
        omegas, alive = omega_batch(s, states, nodes, steps)
        if not np.all(alive) or np.max(np.linalg.cond(omegas)) > OMEGA_CONDITION_CAP:
            break
        best = float(rho)
    logger.info(f"Probed realization radius of {s.name!r}: {best}")
    return best


def check_restricted_dual_pair(s: SprayField, td0, td1, samples, tol: float = 1e-8,
                               nodes: int = 16, steps: int = 64) -> SuiteResult:
    """
    Restriction of the self-dual pair to Σ' = p^{-1}(X₀) ∩ exp^{-1}(X₁).

    Each sample (y, f) of X₀'s conormal chart is moved along the conormal
    fibre until exp lands on X₁ (least squares). At the resulting state z
    the checks are: dim T_zΣ' = dim X₀ + dim X₁, Ω restricted to T_zΣ' is
    nondegenerate, both restricted legs are submersions onto TX₀, TX₁ and
    their kernels are Ω-orthogonal.
    """
    samples = np.array(samples, dtype=float, ndmin=2)
    n = s.dimension
    k0, k1 = td0.embedding.parameter_dimension, td1.embedding.parameter_dimension
    r0 = n - k0
    dimension = np.full(len(samples), np.inf)
    symplectic = np.full(len(samples), np.inf)
    submersion = np.full(len(samples), np.inf)
    orthogonality = np.full(len(samples), np.inf)
    errors = {}

    for b, z in enumerate(samples):
        y, f = z[:k0], z[k0:]
        x = td0.embedding.evaluate(y)[0]
        frame = td0.conormal_frames(y)[0]

        def miss(unknowns):
            state = np.concatenate([x, frame @ (f + unknowns[:r0])])
            flow = flow_states(s, state, 1.0, steps, with_jacobian=False)
            if not flow.alive[0]:
                return np.full(n, 1e3)
            return flow.states[0, :n] - td1.embedding.evaluate(unknowns[r0:])[0]

        try:
            start = td1.locate(x)
        except NotOnTransversal:
            start = td1.embedding.center
        guess = np.concatenate([np.zeros(r0), start])
        try:
            solution = least_squares(miss, guess, xtol=1e-14, ftol=1e-14, gtol=1e-14)
            if np.max(np.abs(solution.fun)) > 1e-9:
                raise NormalFormError(f"Could not land exp on X₁ (miss {np.max(np.abs(solution.fun)):.3e})")
            state = np.concatenate([x, frame @ (f + solution.x[:r0])])
            omega = omega_spray(s, state, nodes, steps)
            flow = geodesic_flow(s, state, 1.0, steps)
        except NormalFormError as e:
            errors[b] = e
            continue
        d_exp = flow.jacobian[:n]
        normal0 = td0.conormal_frames(y)[0]
        normal1 = td1.conormal_frames(solution.x[r0:])[0]
        constraints = np.vstack([normal0.T @ np.hstack([np.eye(n), np.zeros((n, n))]), normal1.T @ d_exp])
        tangent = null_space(constraints)
        dimension[b] = abs(tangent.shape[1] - (k0 + k1))
        if tangent.shape[1] == 0:
            # Σ' is a point: nothing to pair
            symplectic[b], submersion[b], orthogonality[b] = 1.0, 0.0, 0.0
            continue
        restricted = tangent.T @ omega @ tangent
        singular = np.linalg.svd(restricted, compute_uv=False)
        symplectic[b] = singular[0] / singular[-1] if singular.size and singular[-1] > 0 else np.inf
        leg0 = tangent[:n]
        leg1 = d_exp @ tangent
        rank0 = np.linalg.matrix_rank(leg0, tol=1e-8 * max(1.0, np.linalg.norm(leg0, 2)))
        rank1 = np.linalg.matrix_rank(leg1, tol=1e-8 * max(1.0, np.linalg.norm(leg1, 2)))
        submersion[b] = abs(rank0 - k0) + abs(rank1 - k1)
        kernel0 = tangent @ null_space(leg0)
        kernel1 = tangent @ null_space(leg1)
        scale = np.linalg.norm(omega, 2)
        orthogonality[b] = np.max(np.abs(kernel0.T @ omega @ kernel1), initial=0.0) / scale

    detail = failure_detail(errors)
    return SuiteResult([
        CheckRecord("restricted_dimension", worst(dimension), 0.5, detail=detail),
        CheckRecord("restricted_symplectic", worst(symplectic), OMEGA_CONDITION_CAP, detail=detail),
        CheckRecord("restricted_submersions", worst(submersion), 0.5, detail=detail),
        CheckRecord("restricted_orthogonality", worst(orthogonality), tol, detail=detail),
    ])
