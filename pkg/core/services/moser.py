"""
Gauge paths, Moser flows and relative primitives.

A gauge path is t ↦ π_t = π^{t·dα}. Its Moser field V_t = π_t♯α (with the
sharp convention of fields.py) satisfies φ^{t,s}_* π_s = π_t for the
time-dependent flow φ^{t,s} of V.

Two kinds of path share the Moser machinery: GaugePath works from
expression fields and has exact field Jacobians, NumericGaugePath takes
numerically evaluated bivectors and primitives and differentiates the field
by central differences.
"""
import logging
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from core.services.errors import (
    DomainEscape, NormalFormError, NotVanishingOnX, SingularGauge,
)
from core.services.expressions import ChartBox
from core.services.fields import (
    GAUGE_CONDITION_CAP, BivectorField, OneFormField, gauge_matrices,
)
from core.services.integrators import FieldEvaluation, FlowBatch, gauss_legendre, integrate
from core.services.reports import (
    CheckRecord, ResidualRow, SuiteResult, failure_detail, probed_radius, refinement_record, worst,
)
from core.services.spray import FlowResult
from core.services.transversal import ConormalChart, TransversalData, local_model_matrices

logger = logging.getLogger(__name__)

STABILIZATION_PAIRS = ((0.0, 0.5), (0.0, 1.0), (0.5, 1.0))
VANISHING_TOL = 1e-8

MatrixFunction = Callable[[np.ndarray], np.ndarray]


def _gauge_stack(pis: np.ndarray, forms: np.ndarray, times: np.ndarray):
    """P (I + tBP)^{-1} per member; returns (π_t, M, ok) with NaN rows where M is singular."""
    n = pis.shape[-1]
    m = np.eye(n) + times[:, None, None] * (forms @ pis)
    with np.errstate(all="ignore"):
        condition = np.linalg.cond(m)
    ok = np.isfinite(condition) & (condition <= GAUGE_CONDITION_CAP)
    result = np.full(pis.shape, np.nan)
    if np.any(ok):
        solved = np.linalg.solve(np.swapaxes(m[ok], 1, 2), np.swapaxes(pis[ok], 1, 2))
        solved = np.swapaxes(solved, 1, 2)
        result[ok] = 0.5 * (solved - np.swapaxes(solved, 1, 2))
    return result, m, ok


def _stencil_batch(points: np.ndarray, h: float) -> np.ndarray:
    """(B, 2d, d) stencil points x ± h e_l, forward block first."""
    d = points.shape[1]
    offsets = h * np.eye(d)
    return np.concatenate([points[:, None, :] + offsets, points[:, None, :] - offsets], axis=1)


def _central(values: np.ndarray, d: int, h: float) -> np.ndarray:
    """Central differences from stencil values (B, 2d, ...) → (B, ..., d)."""
    forward, backward = values[:, :d], values[:, d:]
    return np.moveaxis((forward - backward) / (2.0 * h), 1, -1)


class GaugePath:
    """
    π_t = π^{t·dα} for expression fields, with dα and its derivatives exact.
    """

    exact = True

    def __init__(self, bivector: BivectorField, alpha: OneFormField, name: str = ""):
        if bivector.dimension != alpha.dimension:
            raise NormalFormError("Bivector and 1-form live on charts of different dimension")
        self.bivector = bivector
        self.alpha = alpha
        self.name = name or f"{bivector.name}^(t d{alpha.name})"

    @property
    def box(self) -> ChartBox:
        return self.bivector.box

    @property
    def dimension(self) -> int:
        return self.bivector.dimension

    def matrices(self, times, points):
        """π_t at a batch of (time, point) pairs; returns (matrices, ok)."""
        points = self.box.require(points)
        times = np.broadcast_to(np.asarray(times, dtype=float), (points.shape[0],))
        result, _, ok = _gauge_stack(self.bivector.matrix(points), self.alpha.differential(points), times)
        return result, ok

    def at(self, t: float, x) -> np.ndarray:
        """
        π_t(x).

        Raises:
            SingularGauge: With the offending t and x.
        """
        x = np.asarray(x, dtype=float).reshape(1, -1)
        result, ok = self.matrices(t, x)
        if not ok[0]:
            raise SingularGauge(f"I + t·dα·π is singular at t={t}, x={x[0].tolist()}", time=t, point=x[0].tolist())
        return result[0]

    def one_shot(self, x) -> np.ndarray:
        """π^{dα}(x) from gauge_matrices, for comparison with at(1, x)."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return gauge_matrices(self.bivector.matrix(x), self.alpha.differential(x), x)[0]

    def field(self, times: np.ndarray, points: np.ndarray, with_jacobian: bool):
        """V_t = π_t α with its exact Jacobian; returns (values, jacobians, ok)."""
        order = 1 if with_jacobian else 0
        pis, d_pis, _ = self.bivector.jet(points, order=order)
        alpha, d_alpha, _ = self.alpha.jet(points, order=1 if with_jacobian else 0)
        if with_jacobian:
            forms, d_forms = self.alpha.differential(points, with_derivative=True)
        else:
            forms = self.alpha.differential(points)
        gauged, m, ok = _gauge_stack(pis, forms, times)
        values = np.einsum("bij,bj->bi", np.nan_to_num(gauged), alpha)
        if not with_jacobian:
            return values, None, ok
        batch, n = points.shape
        jacobians = np.zeros((batch, n, n))
        if np.any(ok):
            m_inv = np.linalg.inv(m[ok])
            p, dp, b, db = pis[ok], d_pis[ok], forms[ok], d_forms[ok]
            t = times[ok][:, None, None]
            for l in range(n):
                d_m = t * (db[..., l] @ p + b @ dp[..., l])
                d_gauged = dp[..., l] @ m_inv - gauged[ok] @ d_m @ m_inv
                jacobians[ok, :, l] = np.einsum("bij,bj->bi", d_gauged, alpha[ok])
            jacobians[ok] += gauged[ok] @ d_alpha[ok]
        return values, jacobians, ok


class NumericGaugePath:
    """
    π_t = π^{t·B} for numerically evaluated π, primitive α and B = dα.

    Args:
        box: Chart of the path.
        bivector: Batch of points ↦ π matrices.
        alpha: Batch of points ↦ α covectors.
        two_form: Batch of points ↦ dα matrices; differenced from alpha when omitted.
        h: Central-difference step for dα (when needed) and the field Jacobian.
    """

    exact = False

    def __init__(self, box: ChartBox, bivector: MatrixFunction, alpha: MatrixFunction,
                 two_form: Optional[MatrixFunction] = None, h: float = 1e-5, name: str = "numeric"):
        self.box = box
        self.bivector = bivector
        self.alpha = alpha
        self.two_form = two_form
        self.h = h
        self.name = name

    @property
    def dimension(self) -> int:
        return self.box.dimension

    def _forms(self, points: np.ndarray) -> np.ndarray:
        if self.two_form is not None:
            return np.asarray(self.two_form(points))
        d = points.shape[1]
        stencil = _stencil_batch(points, self.h)
        values = np.asarray(self.alpha(stencil.reshape(-1, d))).reshape(points.shape[0], 2 * d, d)
        grads = _central(values, d, self.h)   # [b, j, l] = ∂_l α_j
        return np.swapaxes(grads, 1, 2) - grads

    def matrices(self, times, points):
        points = self.box.require(points)
        times = np.broadcast_to(np.asarray(times, dtype=float), (points.shape[0],))
        result, _, ok = _gauge_stack(np.asarray(self.bivector(points)), self._forms(points), times)
        return result, ok

    def at(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        result, ok = self.matrices(t, x)
        if not ok[0]:
            raise SingularGauge(f"I + t·B·π is singular at t={t}, x={x[0].tolist()}", time=t, point=x[0].tolist())
        return result[0]

    def _values(self, times: np.ndarray, points: np.ndarray):
        gauged, ok = self.matrices(times, points)
        alpha = np.asarray(self.alpha(points))
        return np.einsum("bij,bj->bi", np.nan_to_num(gauged), alpha), ok

    def field(self, times: np.ndarray, points: np.ndarray, with_jacobian: bool):
        if not with_jacobian:
            values, ok = self._values(times, points)
            return values, None, ok
        batch, d = points.shape
        stencil = _stencil_batch(points, self.h)
        inside = self.box.contains(stencil.reshape(-1, d)).reshape(batch, 2 * d).all(axis=1)
        values = np.zeros((batch, d))
        jacobians = np.zeros((batch, d, d))
        ok = np.zeros(batch, dtype=bool)
        if np.any(inside):
            members = np.concatenate([points[inside, None, :], stencil[inside]], axis=1)
            count = members.shape[0]
            member_times = np.repeat(times[inside], 2 * d + 1)
            v, good = self._values(member_times, members.reshape(-1, d))
            v = v.reshape(count, 2 * d + 1, d)
            good = good.reshape(count, 2 * d + 1).all(axis=1)
            values[inside] = v[:, 0]
            jacobians[inside] = _central(v[:, 1:], d, self.h)
            ok[inside] = good
        return values, jacobians, ok


class MoserField:
    """
    Moser field (t, x) ↦ V_t(x) of a gauge path, as an integrator vector field.

    Members outside the chart are undefined; members where the gauge is
    singular are undefined and flagged singular.
    """

    def __init__(self, path):
        self.path = path

    @property
    def box(self) -> ChartBox:
        return self.path.box

    def __call__(self, times: np.ndarray, states: np.ndarray, with_jacobian: bool) -> FieldEvaluation:
        batch, d = states.shape
        inside = self.box.contains(states)
        values = np.zeros((batch, d))
        jacobians = np.zeros((batch, d, d)) if with_jacobian else None
        singular = np.zeros(batch, dtype=bool)
        defined = inside.copy()
        if np.any(inside):
            v, j, ok = self.path.field(times[inside], states[inside], with_jacobian)
            values[inside] = v
            if with_jacobian:
                jacobians[inside] = j
            index = np.flatnonzero(inside)
            defined[index[~ok]] = False
            singular[index[~ok]] = True
        return FieldEvaluation(values, jacobians, defined, singular)

    def evaluate(self, t: float, x) -> np.ndarray:
        """V_t(x) at a single point."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        evaluation = self(np.array([float(t)]), x, False)
        if not evaluation.defined[0]:
            raise SingularGauge(f"Moser field undefined at t={t}, x={x[0].tolist()}", time=t)
        return evaluation.values[0]


def gauge_path_eval(gp, t: float, x) -> np.ndarray:
    """π_t(x) = π^{t dα}(x)."""
    return gp.at(t, x)


def moser_batch(mf: MoserField, points, s, t, steps: int = 64, with_jacobian: bool = True) -> FlowBatch:
    """φ^{t,s} applied to a batch of points (s and t scalars or per point)."""
    points = np.array(points, dtype=float, ndmin=2)
    return integrate(mf, points, s, t, steps, with_jacobian, mf.box.contains)


def moser_flow(mf: MoserField, s: float, t: float, x, steps: int = 64) -> FlowResult:
    """
    φ^{t,s}(x) with its Jacobian.

    Raises:
        DomainEscape: If the trajectory leaves the chart.
        SingularGauge: If it reaches a point where the gauge path is undefined.
    """
    batch = moser_batch(mf, x, s, t, steps)
    if not batch.alive[0]:
        where = batch.escape_locations[0]
        if batch.singular[0]:
            raise SingularGauge(f"Moser flow hit a singular gauge at t={batch.escape_times[0]:.6g}",
                                time=float(batch.escape_times[0]), point=where.tolist())
        raise DomainEscape(f"Moser flow left the chart at t={batch.escape_times[0]:.6g}",
                           time=float(batch.escape_times[0]), location=where.tolist())
    return FlowResult(batch.states[0], batch.jacobians[0], steps)


def stabilization_residuals(mf: MoserField, points, s: float, t: float, steps: int = 64):
    """|dφ^{t,s}·π_s·dφᵀ − π_t∘φ^{t,s}| per point, relative to max(1, |π_t|); inf where the flow failed."""
    points = np.array(points, dtype=float, ndmin=2)
    flows = moser_batch(mf, points, s, t, steps)
    residual = np.full(len(points), np.inf)
    alive = flows.alive
    if np.any(alive):
        before, ok_before = mf.path.matrices(s, points[alive])
        after, ok_after = mf.path.matrices(t, flows.states[alive])
        jac = flows.jacobians[alive]
        pushed = jac @ before @ np.swapaxes(jac, 1, 2)
        scale = np.maximum(1.0, np.max(np.abs(after), axis=(1, 2)))
        value = np.max(np.abs(pushed - after), axis=(1, 2)) / scale
        value[~(ok_before & ok_after)] = np.inf
        residual[alive] = value
    return residual, flows


def check_moser(mf: MoserField, points, tol: float = 1e-5, steps: int = 64,
                cocycle_tol: float = 1e-7, pairs: Sequence[Tuple[float, float]] = STABILIZATION_PAIRS,
                refine: bool = True) -> SuiteResult:
    """
    Stabilization at the given (s, t) pairs, the cocycle φ^{1,½}∘φ^{½,0} = φ^{1,0},
    step-doubling agreement and, for exact paths, agreement of π_1 with the
    one-shot gauge transform.
    """
    points = np.array(points, dtype=float, ndmin=2)
    suite = SuiteResult()
    for s, t in pairs:
        residual, _ = stabilization_residuals(mf, points, s, t, steps)
        suite.records.append(CheckRecord(f"stabilization_{s:g}_{t:g}", worst(residual), tol))
        suite.rows.extend(ResidualRow(b, list(x), [], f"stabilization_{s:g}_{t:g}", residual[b])
                          for b, x in enumerate(points))

    whole = moser_batch(mf, points, 0.0, 1.0, steps, with_jacobian=False)
    half = moser_batch(mf, points, 0.0, 0.5, steps, with_jacobian=False)
    rest = moser_batch(mf, half.states, 0.5, 1.0, steps, with_jacobian=False)
    alive = whole.alive & half.alive & rest.alive
    cocycle = np.where(alive, np.max(np.abs(rest.states - whole.states), axis=1), np.inf)
    suite.records.append(CheckRecord("cocycle", worst(cocycle), cocycle_tol))

    if refine:
        fine = moser_batch(mf, points, 0.0, 1.0, 2 * steps, with_jacobian=False)
        agreement = np.where(alive & fine.alive, np.max(np.abs(fine.states - whole.states), axis=1), np.inf)
        suite.records.append(CheckRecord("step_doubling", worst(agreement), 1e-9,
                                         detail=f"steps {steps} vs {2 * steps}"))
        coarse_res, _ = stabilization_residuals(mf, points, 0.0, 1.0, steps)
        fine_res, _ = stabilization_residuals(mf, points, 0.0, 1.0, 2 * steps)
        suite.records.append(refinement_record("stabilization_refinement", worst(coarse_res),
                                               worst(fine_res), steps))

    if getattr(mf.path, "exact", False):
        consistency = [float(np.max(np.abs(mf.path.at(1.0, x) - mf.path.one_shot(x)))) for x in points]
        suite.records.append(CheckRecord("gauge_consistency", worst(consistency), 1e-12))
        delta = 1e-6
        continuity = []
        for x in points:
            change = np.max(np.abs(mf.path.at(0.5 + delta, x) - mf.path.at(0.5, x))) / delta
            continuity.append(float(change))
        suite.records.append(CheckRecord("gauge_continuity", worst(continuity), 1e6,
                                         detail="difference quotient of π_t at t=½"))
    logger.info(f"Moser checks on {mf.path.name!r}: {'pass' if suite.passed else 'fail'}")
    return suite


# Relative primitives on conormal (bundle) charts. Points are (y, f) with
# y the first k coordinates.

def _scaled_fibers(points: np.ndarray, k: int, nodes: np.ndarray) -> np.ndarray:
    """(B·K, n): (y, t_j f) for every point and quadrature node, point-major."""
    repeated = np.repeat(points, len(nodes), axis=0)
    repeated[:, k:] *= np.tile(nodes, points.shape[0])[:, None]
    return repeated


def check_vanishing_on_x(delta: MatrixFunction, k: int, points, tol: float = VANISHING_TOL) -> float:
    """
    |Δ(y, 0)| over the base parts of the points.

    Raises:
        NotVanishingOnX: If Δ does not vanish on the zero section.
    """
    points = np.array(points, dtype=float, ndmin=2)
    zero = points.copy()
    zero[:, k:] = 0.0
    values = np.asarray(delta(zero))
    residual = np.max(np.abs(values).reshape(len(points), -1), axis=1, initial=0.0)
    if np.any(residual > tol):
        index = int(np.argmax(residual))
        raise NotVanishingOnX(
            f"Difference form does not vanish on X at y={zero[index, :k].tolist()} "
            f"(|Δ| = {residual[index]:.3e})",
            parameter=zero[index, :k].tolist(),
        )
    return float(np.max(residual, initial=0.0))


def relative_primitive_batch(delta: MatrixFunction, k: int, points, nodes: int = 16) -> np.ndarray:
    """
    η(y, f) = ∫₀¹ S_t·Δ(y, t f)ᵀ·(0, f) dt with S_t = diag(I_k, t·I), for a batch.

    This is the fibrewise homotopy operator for the Euler field: dη = Δ when
    Δ is closed and vanishes on the zero section.
    """
    points = np.array(points, dtype=float, ndmin=2)
    batch, n = points.shape
    t, w = gauss_legendre(nodes)
    values = np.asarray(delta(_scaled_fibers(points, k, t))).reshape(batch, nodes, n, n)
    euler = np.zeros((batch, n))
    euler[:, k:] = points[:, k:]
    contracted = np.einsum("bkji,bj->bki", values, euler)
    contracted[:, :, k:] *= t[None, :, None]
    return np.einsum("k,bki->bi", w, contracted)


def relative_primitive(delta: MatrixFunction, k: int, z, nodes: int = 16) -> np.ndarray:
    """
    The relative primitive η at one chart point.

    Raises:
        NotVanishingOnX
    """
    z = np.asarray(z, dtype=float)
    check_vanishing_on_x(delta, k, z)
    return relative_primitive_batch(delta, k, z, nodes)[0]


def check_primitive(delta: MatrixFunction, k: int, points, nodes: int = 16, h: float = 1e-5,
                    tol: float = 1e-4, jet_tol: float = 1e-8) -> SuiteResult:
    """dη = Δ by central differences, and η together with its first derivatives vanishing at f = 0."""
    points = np.array(points, dtype=float, ndmin=2)
    batch, n = points.shape
    check_vanishing_on_x(delta, k, points)

    def primitive(z):
        return relative_primitive_batch(delta, k, z, nodes)

    stencil = _stencil_batch(points, h)
    grads = _central(primitive(stencil.reshape(-1, n)).reshape(batch, 2 * n, n), n, h)
    d_eta = np.swapaxes(grads, 1, 2) - grads
    target = np.asarray(delta(points))
    closure = np.max(np.abs(d_eta - target), axis=(1, 2))

    zero = points.copy()
    zero[:, k:] = 0.0
    on_x = np.max(np.abs(primitive(zero)), axis=1)
    zero_stencil = _stencil_batch(zero, h)
    zero_grads = _central(primitive(zero_stencil.reshape(-1, n)).reshape(batch, 2 * n, n), n, h)
    first = np.max(np.abs(zero_grads).reshape(batch, -1), axis=1)
    return SuiteResult([
        CheckRecord("primitive_closure", worst(closure), tol),
        CheckRecord("primitive_vanishes", worst(on_x), jet_tol),
        CheckRecord("primitive_first_jet", worst(first), jet_tol * 100),
    ], [ResidualRow(b, list(z[:k]), list(z[k:]), "primitive_closure", closure[b]) for b, z in enumerate(points)])


def linear_extension(td: TransversalData) -> MatrixFunction:
    """
    The closed extension d(½ Σ σ_ab(y) f_a df_b) of σ = −w_X to the conormal chart.

    Its fibre block is −w_X(y) everywhere, so it agrees with every other
    extension on TE|_X. The (y, f) blocks carry ½ Σ_a f_a ∂_y σ_ab.
    """
    k = td.parameter_dimension

    def evaluate(points):
        points = np.array(points, dtype=float, ndmin=2)
        batch, n = points.shape
        y, f = points[:, :k], points[:, k:]
        pairing, derivative = td.pairing_with_derivative(y if k else np.zeros((batch, 0)))
        sigma, d_sigma = -pairing, -derivative
        result = np.zeros((batch, n, n))
        result[:, k:, k:] = sigma
        if k:
            mixed = 0.5 * np.einsum("ba,bacm->bmc", f, d_sigma)
            result[:, :k, k:] = mixed
            result[:, k:, :k] = -np.swapaxes(mixed, 1, 2)
        return result
    return evaluate


def verify_extension_independence(td: TransversalData, cc: ConormalChart, sigma_a: MatrixFunction,
                                  sigma_b: MatrixFunction, samples, tol: float = 1e-4, nodes: int = 16,
                                  steps: int = 8, h: float = 1e-5, fix_tol: float = 1e-8,
                                  identity_tol: float = 1e-6) -> SuiteResult:
    """
    Moser isotopy between the local models of two closed extensions.

    Builds η = relative_primitive(σ̃_B − σ̃_A), flows the path
    π(σ̃_A)^{t dη} from t=0 to 1 and checks (i) the flow pushes π(σ̃_A)
    to π(σ̃_B), (ii) it fixes f = 0, (iii) its differential there is the
    identity.

    Raises:
        NotVanishingOnX: If the extensions differ on TE|_X.
    """
    samples = np.array(samples, dtype=float, ndmin=2)
    k, n = cc.k, cc.dimension

    def base_params(points):
        return points[:, :k] if k else np.zeros((points.shape[0], 0))

    def difference(points):
        return np.asarray(sigma_b(points)) - np.asarray(sigma_a(points))

    def model(sigma):
        def evaluate(points):
            points = np.array(points, dtype=float, ndmin=2)
            matrices, _ = local_model_matrices(td.induced(base_params(points)), np.asarray(sigma(points)))
            return matrices
        return evaluate

    check_vanishing_on_x(difference, k, samples)
    path = NumericGaugePath(
        cc.box, model(sigma_a), lambda z: relative_primitive_batch(difference, k, z, nodes),
        two_form=difference, h=h, name="extension path",
    )
    mf = MoserField(path)

    errors: Dict[int, Exception] = {}
    flows = moser_batch(mf, samples, 0.0, 1.0, steps)
    pushforward = np.full(len(samples), np.inf)
    alive = flows.alive
    for b in np.flatnonzero(~alive):
        errors[int(b)] = SingularGauge("Moser flow hit a singular gauge") if flows.singular[b] \
            else DomainEscape(f"Moser flow left the chart at t={flows.escape_times[b]:.4g}")
    if np.any(alive):
        before = model(sigma_a)(samples[alive])
        after = model(sigma_b)(flows.states[alive])
        jac = flows.jacobians[alive]
        scale = np.maximum(1.0, np.max(np.abs(after), axis=(1, 2)))
        pushforward[alive] = np.max(np.abs(jac @ before @ np.swapaxes(jac, 1, 2) - after), axis=(1, 2)) / scale

    zero = samples.copy()
    zero[:, k:] = 0.0
    fixed = moser_batch(mf, zero, 0.0, 1.0, steps)
    moved = np.where(fixed.alive, np.max(np.abs(fixed.states - zero), axis=1), np.inf)
    identity = np.where(fixed.alive, np.max(np.abs(fixed.jacobians - np.eye(n)).reshape(len(zero), -1), axis=1),
                        np.inf)

    radius = probed_radius(np.linalg.norm(samples[:, k:], axis=1), np.isfinite(pushforward))
    rows = [ResidualRow(b, list(z[:k]), list(z[k:]), "extension_pushforward", pushforward[b])
            for b, z in enumerate(samples)]
    logger.info(f"Extension independence along {td.embedding.name!r}: "
                f"pushforward {worst(pushforward):.3e}, fixes X {worst(moved):.3e}")
    return SuiteResult([
        CheckRecord("extension_pushforward", worst(pushforward), tol, probed_radius=radius,
                    detail=failure_detail(errors)),
        CheckRecord("extension_fixes_x", worst(moved), fix_tol),
        CheckRecord("extension_identity_differential", worst(identity), identity_tol),
    ], rows)
