"""
Equivariant splitting: matrix square roots and the b-map, Haar averaging,
equivariant symplectic trivializations, invariant sprays and transversals,
and the splitting pipeline that yields coordinates (p, q, y) in which π is
canonical in (p, q), equal to π_X in y, and a compact group acts linearly
and block-diagonally.

Group elements act on the chart affinely about a fixed point x₀,
x ↦ x₀ + g (x − x₀), and on covectors by g^{-T}.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import expm, qr, solve_sylvester

from core.services.errors import (
    GroupActionError, NormalFormError, NotInvertible, RankOddity, SpectrumOnCut,
)
from core.services.expressions import ChartBox
from core.services.fields import BivectorField
from core.services.integrators import FieldEvaluation, integrate
from core.services.moser import MoserField, NumericGaugePath, moser_batch, relative_primitive_batch
from core.services.reports import CheckRecord, ResidualRow, SuiteResult, worst
from core.services.sampling import SampleGenerator
from core.services.spray import CotangentChart, SprayField, flow_states
from core.services.transversal import (
    ConormalChart, Embedding, TransversalData, check_transversal, conormal_chart,
    SigmaTable, local_model_matrices, numerical_rank,
)

logger = logging.getLogger(__name__)

CLOSURE_TOL = 1e-10
INVARIANCE_TOL = 1e-8
CUT_DISTANCE = 1e-8
SQRT_TOL = 1e-12
SQRT_MAX_ITERATIONS = 100
INTERTWINER_CONDITION_CAP = 1e8


class GroupAction:
    """
    A finite family of linear symmetries g about a fixed point, with Haar weights.

    Finite groups carry uniform weights; the circle is sampled at equally
    spaced angles (the trapezoid rule, exact for the node subgroup).
    """

    def __init__(self, matrices, fixed_point, weights=None, kind: str = "finite",
                 name: str = "", generator=None):
        self.matrices = np.array(matrices, dtype=float, ndmin=3)
        order, n, m = self.matrices.shape
        if n != m:
            raise GroupActionError(f"Group elements must be square, got shape {self.matrices.shape[1:]}")
        self.fixed_point = np.asarray(fixed_point, dtype=float)
        if self.fixed_point.shape != (n,):
            raise GroupActionError(f"Fixed point must have {n} coordinates")
        self.weights = np.full(order, 1.0 / order) if weights is None else np.asarray(weights, dtype=float)
        self.kind = kind
        self.name = name or kind
        self.generator = None if generator is None else np.asarray(generator, dtype=float)
        self.inverses = np.linalg.inv(self.matrices)

    @classmethod
    def trivial(cls, dimension: int, fixed_point) -> "GroupAction":
        return cls(np.eye(dimension)[None], fixed_point, kind="trivial", name="trivial")

    @classmethod
    def finite(cls, matrices, fixed_point, name: str = "finite") -> "GroupAction":
        """
        Raises:
            GroupActionError: If the identity is missing or the list is not closed under products.
        """
        action = cls(matrices, fixed_point, kind="finite", name=name)
        action.check_closure()
        return action

    @classmethod
    def circle(cls, generator, nodes: int, fixed_point, name: str = "circle") -> "GroupAction":
        """exp(θ J) at θ_j = 2πj/nodes; J must generate a 2π-periodic rotation."""
        generator = np.asarray(generator, dtype=float)
        if np.max(np.abs(expm(2.0 * np.pi * generator) - np.eye(generator.shape[0]))) > CLOSURE_TOL:
            raise GroupActionError("Circle generator is not 2π-periodic")
        angles = 2.0 * np.pi * np.arange(nodes) / nodes
        matrices = np.stack([expm(theta * generator) for theta in angles])
        return cls(matrices, fixed_point, kind="circle", name=name, generator=generator)

    @property
    def order(self) -> int:
        return self.matrices.shape[0]

    @property
    def dimension(self) -> int:
        return self.matrices.shape[1]

    @property
    def is_trivial(self) -> bool:
        return self.order == 1

    def element(self, theta: float) -> np.ndarray:
        """Circle element at an arbitrary angle."""
        if self.generator is None:
            raise GroupActionError("Only circle actions have elements at arbitrary angles")
        return expm(theta * self.generator)

    def check_closure(self, tol: float = CLOSURE_TOL) -> float:
        eye = np.eye(self.dimension)
        if np.min(np.max(np.abs(self.matrices - eye), axis=(1, 2))) > tol:
            raise GroupActionError(f"Group {self.name!r} does not contain the identity")
        worst_gap = 0.0
        for a in self.matrices:
            products = np.einsum("ij,gjk->gik", a, self.matrices)
            gaps = np.max(np.abs(products[:, None] - self.matrices[None]), axis=(2, 3))
            gap = float(np.max(np.min(gaps, axis=1)))
            worst_gap = max(worst_gap, gap)
        if worst_gap > tol:
            raise GroupActionError(f"Group {self.name!r} is not closed under products (gap {worst_gap:.3e})")
        return worst_gap

    def apply(self, points, matrices: Optional[np.ndarray] = None) -> np.ndarray:
        """x₀ + g (x − x₀) for every element: shape (G, B, n)."""
        points = np.array(points, dtype=float, ndmin=2)
        matrices = self.matrices if matrices is None else np.array(matrices, dtype=float, ndmin=3)
        return self.fixed_point + np.einsum("gij,bj->gbi", matrices, points - self.fixed_point)

    def lift(self, states, matrices: Optional[np.ndarray] = None) -> np.ndarray:
        """Cotangent lift (x, ξ) ↦ (x₀ + g(x − x₀), g^{-T} ξ): shape (G, B, 2n)."""
        states = np.array(states, dtype=float, ndmin=2)
        n = self.dimension
        matrices = self.matrices if matrices is None else np.array(matrices, dtype=float, ndmin=3)
        inverse_t = np.swapaxes(np.linalg.inv(matrices), 1, 2)
        base = self.apply(states[:, :n], matrices)
        fiber = np.einsum("gij,bj->gbi", inverse_t, states[:, n:])
        return np.concatenate([base, fiber], axis=2)

    def invariance_residual(self, pi: BivectorField, points) -> float:
        """max |g π(x) gᵀ − π(x₀ + g(x − x₀))| over elements and points."""
        points = np.array(points, dtype=float, ndmin=2)
        moved = self.apply(points)
        values = pi.matrix(points)
        residual = 0.0
        for g, image in zip(self.matrices, moved):
            inside = pi.box.contains(image)
            if not np.any(inside):
                continue
            pushed = g @ values[inside] @ g.T
            residual = max(residual, float(np.max(np.abs(pushed - pi.matrix(image[inside])))))
        return residual

    def check_poisson(self, pi: BivectorField, points, tol: float = INVARIANCE_TOL) -> float:
        """
        Raises:
            GroupActionError: If some element does not preserve π at the sample points.
        """
        residual = self.invariance_residual(pi, points)
        if residual > tol:
            raise GroupActionError(f"Group {self.name!r} does not preserve {pi.name!r} (residual {residual:.3e})",
                                   residual=residual)
        return residual


@dataclass
class SymplecticPair:
    """Reference form ω₀ and a candidate ω on the same vector space."""
    reference: np.ndarray
    form: np.ndarray

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=float)
        self.form = np.asarray(self.form, dtype=float)
        for what, matrix in (("reference", self.reference), ("form", self.form)):
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] % 2:
                raise NormalFormError(f"Symplectic {what} must be square of even size, got {matrix.shape}")
            if np.max(np.abs(matrix + matrix.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(matrix))):
                raise NormalFormError(f"Symplectic {what} is not antisymmetric")
        if self.form.shape != self.reference.shape:
            raise NormalFormError("Forms of a symplectic pair must have the same shape")
        singular = np.linalg.svd(self.reference, compute_uv=False)
        if singular.size and singular[-1] <= 1e-12 * singular[0]:
            raise NotInvertible("Reference form is degenerate")


def principal_sqrt(m, tol: float = SQRT_TOL, max_iterations: int = SQRT_MAX_ITERATIONS) -> np.ndarray:
    """
    Principal square root by the determinant-scaled Denman–Beavers iteration.

    Accepts one matrix or a stack. The branch is the one with cut along
    (−∞, 0]; spectra touching the cut are rejected.

    Raises:
        SpectrumOnCut: If an eigenvalue lies within 1e-8 (relative) of the cut,
            or the iteration does not converge.
    """
    m = np.asarray(m, dtype=float)
    single = m.ndim == 2
    stack = m[None] if single else m
    n = stack.shape[-1]
    scale = np.maximum(1.0, np.linalg.norm(stack, 2, axis=(1, 2)))
    eigenvalues = np.linalg.eigvals(stack)
    distance = np.where(eigenvalues.real > 0.0, np.abs(eigenvalues), np.abs(eigenvalues.imag))
    if np.any(distance <= CUT_DISTANCE * scale[:, None]):
        index = np.unravel_index(int(np.argmin(distance / scale[:, None])), distance.shape)
        raise SpectrumOnCut(
            f"Eigenvalue {eigenvalues[index]:.6g} lies on the branch cut of the principal square root",
            eigenvalue=complex(eigenvalues[index]),
        )

    y = stack.copy()
    z = np.broadcast_to(np.eye(n), stack.shape).copy()
    scaling = True
    for iteration in range(max_iterations):
        if scaling:
            _, log_y = np.linalg.slogdet(y)
            _, log_z = np.linalg.slogdet(z)
            mu = np.exp(-(log_y + log_z) / (2.0 * n))[:, None, None]
        else:
            mu = np.ones((stack.shape[0], 1, 1))
        y_next = 0.5 * (mu * y + np.linalg.inv(z) / mu)
        z_next = 0.5 * (mu * z + np.linalg.inv(y) / mu)
        change = np.linalg.norm(y_next - y, axis=(1, 2)) / np.linalg.norm(y_next, axis=(1, 2))
        y, z = y_next, z_next
        if np.max(change) < 1e-2:
            scaling = False
        if np.max(change) <= tol:
            break
    else:
        raise SpectrumOnCut(f"Square-root iteration did not converge in {max_iterations} steps")
    for _ in range(2):
        y, z = 0.5 * (y + np.linalg.inv(z)), 0.5 * (z + np.linalg.inv(y))
    logger.debug(f"principal_sqrt converged after {iteration + 1} iterations")
    return y[0] if single else y


def b_map(sp: SymplecticPair) -> np.ndarray:
    """b_ω = √(ω₀^{-1} ω); bᵀ ω₀ b = ω and b_{ω₀} = I."""
    return principal_sqrt(np.linalg.solve(sp.reference, sp.form))


def linear_moser_sqrt(omega0, omega, steps: int = 64) -> np.ndarray:
    """
    Time-one map of the linear Moser field v ↦ ½ ω_t^{-1}(ω − ω₀) v with
    ω_t = t ω₀ + (1 − t) ω; it pulls ω₀ back to ω and equals b_map.
    """
    omega0 = np.asarray(omega0, dtype=float)
    omega = np.asarray(omega, dtype=float)
    d = omega0.shape[0]
    difference = omega - omega0

    def field(times, states, with_jacobian):
        omega_t = times[:, None, None] * omega0 + (1.0 - times)[:, None, None] * omega
        generator = 0.5 * np.linalg.solve(omega_t, np.broadcast_to(difference, omega_t.shape))
        values = np.einsum("bij,bj->bi", generator, states)
        return FieldEvaluation(values, generator if with_jacobian else None, np.ones(len(states), dtype=bool))

    return integrate(field, np.zeros((1, d)), 0.0, 1.0, steps).jacobians[0]


def random_symplectic(omega0: np.ndarray, sampler: SampleGenerator, spread: float = 0.3) -> np.ndarray:
    """exp(ω₀^{-1} H) for a random symmetric H: a symplectic map of ω₀."""
    d = omega0.shape[0]
    h = sampler.symmetric(d, 1, spread)[0]
    return expm(np.linalg.solve(omega0, h))


def check_b_map(sampler: SampleGenerator, dimensions: Sequence[int] = (2, 4, 6), trials: int = 100,
                radius: float = 0.3) -> SuiteResult:
    """b_{ω₀} = I, bᵀω₀b = ω and s^{-1} b_ω s = b_{sᵀωs} over random trials in the radius ball."""
    identity, pullback, equivariance, moser = [], [], [], []
    for d in dimensions:
        for _ in range(trials):
            frame = sampler.invertible(d, 1, 0.2)[0]
            base = frame.T @ _standard_form(d) @ frame
            perturbation = sampler.antisymmetric(d, 1)[0]
            smallest = np.linalg.svd(base, compute_uv=False)[-1]
            perturbation *= radius * smallest / max(np.linalg.norm(perturbation, 2), 1e-300)
            perturbation *= sampler.uniform(0.0, 1.0, 1)[0]
            omega = base + perturbation
            b = b_map(SymplecticPair(base, omega))
            identity.append(float(np.max(np.abs(b_map(SymplecticPair(base, base)) - np.eye(d)))))
            pullback.append(float(np.max(np.abs(b.T @ base @ b - omega)) / max(1.0, np.max(np.abs(omega)))))
            s = random_symplectic(base, sampler, 0.1)
            moved = b_map(SymplecticPair(base, s.T @ omega @ s))
            equivariance.append(float(np.max(np.abs(np.linalg.solve(s, b @ s) - moved))))
            moser.append(float(np.max(np.abs(linear_moser_sqrt(base, omega) - b))))
    return SuiteResult([
        CheckRecord("b_identity", worst(identity), 1e-12),
        CheckRecord("b_pullback", worst(pullback), 1e-10),
        CheckRecord("b_equivariance", worst(equivariance), 1e-9),
        CheckRecord("b_linear_moser", worst(moser), 1e-8),
    ], [ResidualRow(index, [], [], "b_linear_moser", value) for index, value in enumerate(moser)])


def _standard_form(d: int) -> np.ndarray:
    """ω_std = [[0, I], [−I, 0]] in (p, q) order."""
    s = d // 2
    eye, zero = np.eye(s), np.zeros((s, s))
    return np.block([[zero, eye], [-eye, zero]])


def standard_bivector(d: int) -> np.ndarray:
    """π_std = ω_std^{-1} = [[0, −I], [I, 0]]: the bivector Σ ∂q ∧ ∂p."""
    return -_standard_form(d)


def darboux_basis(omega0) -> np.ndarray:
    """
    Symplectic Gram–Schmidt: D with Dᵀ ω₀ D = [[0, I], [−I, 0]], columns (p₁..p_s, q₁..q_s).

    Raises:
        NotInvertible: If ω₀ is degenerate.
    """
    omega0 = np.asarray(omega0, dtype=float)
    d = omega0.shape[0]
    remaining = [np.eye(d)[:, i] for i in range(d)]
    ps, qs = [], []
    scale = max(1.0, float(np.max(np.abs(omega0), initial=0.0)))
    while remaining:
        p = remaining.pop(0)
        pairings = [float(p @ omega0 @ v) for v in remaining]
        if not pairings or max(abs(c) for c in pairings) <= 1e-12 * scale:
            raise NotInvertible("Form is degenerate; no Darboux basis")
        index = int(np.argmax(np.abs(pairings)))
        q = remaining.pop(index) / pairings[index]
        remaining = [v - float(v @ omega0 @ q) * p + float(v @ omega0 @ p) * q for v in remaining]
        ps.append(p)
        qs.append(q)
    return np.column_stack(ps + qs) if d else np.zeros((0, 0))


def average_metric(action: GroupAction) -> np.ndarray:
    """Σ_g μ(g) gᵀ g, the averaged Euclidean inner product."""
    return np.einsum("g,gji,gjk->ik", action.weights, action.matrices, action.matrices)


def average_one_form(action: GroupAction, eta: Callable, points) -> np.ndarray:
    """(∫ g*η dμ)(x) = Σ_g μ(g) gᵀ η(x₀ + g(x − x₀)) for a batch of points."""
    points = np.array(points, dtype=float, ndmin=2)
    moved = action.apply(points)
    total = np.zeros_like(points)
    for weight, g, image in zip(action.weights, action.matrices, moved):
        total += weight * np.asarray(eta(image)) @ g
    return total


def trivial_cocycle(rank: int, order: int = 1) -> Callable:
    """ρ_y(g) = I for every element."""
    def cocycle(params, with_derivative: bool = False):
        params = np.array(params, dtype=float, ndmin=2)
        batch, k = params.shape
        rho = np.broadcast_to(np.eye(rank), (batch, order, rank, rank)).copy()
        if with_derivative:
            return rho, np.zeros((batch, order, rank, rank, k))
        return rho
    return cocycle


def parameter_action(td: TransversalData, action: GroupAction) -> np.ndarray:
    """
    L_g with g·χ(y) = χ(L_g y), for an affine invariant transversal through the fixed point.

    Raises:
        GroupActionError: If the transversal is not invariant.
    """
    k = td.parameter_dimension
    if k == 0:
        return np.zeros((action.order, 0, 0))
    directions = td.embedding.derivative(td.embedding.center)[0]
    origin = td.embedding.evaluate(td.embedding.center)[0]
    pseudo = np.linalg.pinv(directions)
    matrices = np.einsum("ij,gjk,kl->gil", pseudo, action.matrices, directions)
    gap = np.max(np.abs(np.einsum("gij,jk->gik", action.matrices, directions)
                        - np.einsum("ij,gjk->gik", directions, matrices)))
    if gap > INVARIANCE_TOL or np.max(np.abs(origin - action.fixed_point)) > INVARIANCE_TOL:
        raise GroupActionError(f"Transversal {td.embedding.name!r} is not invariant under {action.name!r}")
    return matrices


def conormal_cocycle(td: TransversalData, action: GroupAction, parameters: np.ndarray) -> Callable:
    """
    ρ_y(g) = N(L_g y)ᵀ g^{-T} N(y): the action on conormal fibre coordinates, with its y-derivative.
    """
    inverse_t = np.swapaxes(action.inverses, 1, 2)

    def cocycle(params, with_derivative: bool = False):
        params = np.array(params, dtype=float, ndmin=2)
        batch, k = params.shape
        frames, d_frames = td.conormal_frames(params, with_derivative=True)
        r = frames.shape[2]
        rho = np.zeros((batch, action.order, r, r))
        d_rho = np.zeros((batch, action.order, r, r, k))
        for index, (g_inv_t, l_g) in enumerate(zip(inverse_t, parameters)):
            moved = params @ l_g.T
            moved_frames, moved_d = td.conormal_frames(moved, with_derivative=True)
            transported = g_inv_t @ frames
            rho[:, index] = np.swapaxes(moved_frames, 1, 2) @ transported
            if with_derivative:
                for m in range(k):
                    d_moved = np.einsum("bial,l->bia", moved_d, l_g[:, m])
                    d_rho[:, index, :, :, m] = (np.swapaxes(d_moved, 1, 2) @ transported
                                                + np.swapaxes(moved_frames, 1, 2) @ g_inv_t @ d_frames[..., m])
        return (rho, d_rho) if with_derivative else rho
    return cocycle


def average_intertwiner(action: GroupAction, rho: Callable, y, base=None, with_derivative: bool = False):
    """
    A_y = Σ_g μ(g) ρ_{x₀}(g)^{-1} ρ_y(g) for a batch of parameters.

    Raises:
        NotInvertible: If A_y is too badly conditioned (y too far from the fixed point).
    """
    y = np.array(y, dtype=float, ndmin=2)
    base = np.zeros((1, y.shape[1])) if base is None else np.array(base, dtype=float, ndmin=2)
    reference_inverse = np.linalg.inv(rho(base)[0])
    if with_derivative:
        values, derivative = rho(y, with_derivative=True)
    else:
        values, derivative = rho(y), None
    intertwiner = np.einsum("g,gij,bgjk->bik", action.weights, reference_inverse, values)
    condition = np.linalg.cond(intertwiner) if intertwiner.shape[-1] else np.ones(len(y))
    if np.any(~np.isfinite(condition) | (condition > INTERTWINER_CONDITION_CAP)):
        index = int(np.argmax(np.where(np.isfinite(condition), condition, np.inf)))
        raise NotInvertible(f"Averaged intertwiner is singular at y={y[index].tolist()}",
                            parameter=y[index].tolist())
    if not with_derivative:
        return intertwiner
    return intertwiner, np.einsum("g,gij,bgjkm->bikm", action.weights, reference_inverse, derivative)


def intertwining_residual(action: GroupAction, rho: Callable, parameters: np.ndarray, y, base=None) -> float:
    """max |A_{L_g y} ρ_y(g) − ρ_{x₀}(g) A_y| over elements and parameters."""
    y = np.array(y, dtype=float, ndmin=2)
    base = np.zeros((1, y.shape[1])) if base is None else base
    reference = rho(base)[0]
    a_y = average_intertwiner(action, rho, y, base)
    values = rho(y)
    residual = 0.0
    for index, l_g in enumerate(parameters):
        moved = average_intertwiner(action, rho, y @ l_g.T, base)
        lhs = moved @ values[:, index]
        rhs = reference[index] @ a_y
        residual = max(residual, float(np.max(np.abs(lhs - rhs), initial=0.0)))
    return residual


class EquivariantTrivialization:
    """
    y ↦ Φ_y = b_{σ'_y} A_y with σ'_y = A_y^{-T} σ_y A_y^{-1}, so that Φ_yᵀ σ₀ Φ_y = σ_y
    and Φ_{gy} ρ_y(g) = ρ_{x₀}(g) Φ_y.

    Args:
        sigma: Maps parameters (B,k) to (σ_y (B,r,r), ∂σ_y (B,r,r,k)).
        action: The group.
        cocycle: The fibre representation ρ, with derivative on request.
        base: Parameter of the fixed point.
    """

    def __init__(self, sigma: Callable, action: GroupAction, cocycle: Callable, base):
        self.sigma = sigma
        self.action = action
        self.cocycle = cocycle
        self.base = np.array(base, dtype=float, ndmin=2)
        self.reference = np.asarray(sigma(self.base)[0])[0]
        self.reference_inverse = np.linalg.inv(self.reference) if self.reference.size else self.reference

    @property
    def rank(self) -> int:
        return self.reference.shape[0]

    def evaluate(self, y, with_derivative: bool = False):
        """Φ_y (B,r,r) and, on request, ∂Φ_y (B,r,r,k) with exact derivatives."""
        y = np.array(y, dtype=float, ndmin=2)
        batch, k = y.shape
        r = self.rank
        if r == 0:
            phi = np.zeros((batch, 0, 0))
            return (phi, np.zeros((batch, 0, 0, k))) if with_derivative else phi
        sigma, d_sigma = self.sigma(y)
        a, d_a = average_intertwiner(self.action, self.cocycle, y, self.base, with_derivative=True)
        a_inv = np.linalg.inv(a)
        transported = np.swapaxes(a_inv, 1, 2) @ sigma @ a_inv
        b = principal_sqrt(self.reference_inverse @ transported)
        phi = b @ a
        if not with_derivative:
            return phi
        d_phi = np.zeros((batch, r, r, k))
        for m in range(k):
            da = d_a[..., m]
            d_transported = np.swapaxes(a_inv, 1, 2) @ (
                d_sigma[..., m] - np.swapaxes(da, 1, 2) @ transported @ a - np.swapaxes(a, 1, 2) @ transported @ da
            ) @ a_inv
            rhs = self.reference_inverse @ d_transported
            db = np.stack([solve_sylvester(b[i], b[i], rhs[i]) for i in range(batch)])
            d_phi[..., m] = db @ a + b @ da
        return phi, d_phi

    def check(self, y, parameters: np.ndarray) -> SuiteResult:
        """Φᵀσ₀Φ = σ_y and Φ_{L_g y} ρ_y(g) = ρ_{x₀}(g) Φ_y at the parameters."""
        y = np.array(y, dtype=float, ndmin=2)
        phi = self.evaluate(y)
        sigma, _ = self.sigma(y)
        pullback = np.max(np.abs(np.swapaxes(phi, 1, 2) @ self.reference @ phi - sigma), initial=0.0)
        rho = self.cocycle(y)
        reference = self.cocycle(self.base)[0]
        equivariance = 0.0
        for index, l_g in enumerate(parameters):
            moved = self.evaluate(y @ l_g.T)
            gap = moved @ rho[:, index] - reference[index] @ phi
            equivariance = max(equivariance, float(np.max(np.abs(gap), initial=0.0)))
        intertwining = intertwining_residual(self.action, self.cocycle, parameters, y, self.base) if self.rank else 0.0
        return SuiteResult([
            CheckRecord("trivialization_pullback", pullback, 1e-9),
            CheckRecord("trivialization_equivariance", equivariance, 1e-8),
            CheckRecord("intertwiner_equivariance", intertwining, 1e-8),
        ])


def equivariant_trivialization(sigma: Callable, action: GroupAction, cocycle: Callable,
                               base=None) -> EquivariantTrivialization:
    """
    Raises:
        NotInvertible: If σ at the fixed point is degenerate.
    """
    probe = np.array(base if base is not None else [], dtype=float, ndmin=2)
    reference = np.asarray(sigma(probe)[0])[0]
    if reference.size and np.linalg.svd(reference, compute_uv=False)[-1] <= 1e-12:
        raise NotInvertible("Symplectic fibre form at the fixed point is degenerate")
    return EquivariantTrivialization(sigma, action, cocycle, probe)


def invariant_spray(pi: BivectorField, action: GroupAction, fiber_bound: float = 1.0,
                    spray: Optional[SprayField] = None) -> SprayField:
    """
    Haar average of a spray: the quadratic term is averaged as
    Γ' = Σ μ(g) g^{-T}·Γ(gᵀ·, gᵀ·); the horizontal part is already invariant.
    """
    spray = spray or SprayField(pi, CotangentChart(pi.box, fiber_bound), None, pi.name)
    if spray.quadratic is None:
        return spray
    inverse_t = np.swapaxes(action.inverses, 1, 2)
    averaged = np.einsum("g,gia,abc,gjb,gkc->ijk", action.weights, inverse_t, spray.quadratic,
                         action.matrices, action.matrices)
    return SprayField(spray.bivector, spray.chart, averaged, f"<{spray.name}>")


def spray_equivariance(s: SprayField, action: GroupAction, states, t: float = 1.0, steps: int = 32) -> float:
    """max |φᵗ(g#z) − g#(φᵗ z)| over elements and states."""
    states = np.array(states, dtype=float, ndmin=2)
    flowed = flow_states(s, states, t, steps, with_jacobian=False)
    lifted = action.lift(states)
    residual = 0.0
    for lifted_states, lifted_ends in zip(lifted, action.lift(flowed.states)):
        image = flow_states(s, lifted_states, t, steps, with_jacobian=False)
        ok = image.alive & flowed.alive
        if not np.all(ok):
            return float("inf")
        residual = max(residual, float(np.max(np.abs(image.states - lifted_ends))))
    return residual


def invariant_transversal(pi: BivectorField, action: GroupAction, x0, half_width: float,
                          name: str = "invariant slice") -> Embedding:
    """
    The affine slice x₀ + W·y through the G-orthogonal complement of im π(x₀).

    W is chosen from coordinate axes (pivoted QR of their projections onto
    the complement), orthonormalized, with the sign fixed so each column's
    largest entry is positive.

    Raises:
        RankOddity: If the numerical rank of π(x₀) is odd.
        NotTransversal: If the slice is not a Poisson transversal.
    """
    x0 = np.asarray(x0, dtype=float)
    value = pi.at(x0)
    n = value.shape[0]
    rank = numerical_rank(value)
    if rank % 2:
        raise RankOddity(f"π(x₀) has odd numerical rank {rank}", rank=rank)
    m = n - rank
    if m == 0:
        embedding = Embedding.at_point(pi.box, x0, name)
    else:
        metric = average_metric(action)
        image = np.linalg.svd(value)[0][:, :rank]
        if rank:
            projector = np.eye(n) - image @ np.linalg.solve(image.T @ metric @ image, image.T @ metric)
        else:
            projector = np.eye(n)
        _, _, pivots = qr(projector, pivoting=True)
        chosen = sorted(int(p) for p in pivots[:m])
        directions, _ = np.linalg.qr(projector[:, chosen])
        signs = np.sign(directions[np.argmax(np.abs(directions), axis=0), np.arange(m)])
        directions = directions * signs
        parameters = ChartBox.cube(name, m, half_width)
        embedding = Embedding.affine(pi.box, x0, directions, parameters, name)
    grid = np.zeros((1, 0))
    if m:
        grid = np.array(np.meshgrid(*[[-half_width, 0.0, half_width]] * m)).reshape(m, -1).T
    check_transversal(pi, embedding, grid)
    logger.info(f"Invariant transversal of dimension {m} through {x0.tolist()}")
    return embedding


@dataclass
class WeinsteinSplit:
    """
    Splitting chart Ψ: (p, q, y) ↦ M with Ψ_*(π_std ⊕ π_X) = π.

    Internally Ψ = exp ∘ ι ∘ Θ ∘ φ ∘ E where E(p, q, y) = (y, D(p, q)),
    φ is the Moser isotopy from the constant extension to Θ*σ̃, Θ(y, e) =
    (y, Φ_y^{-1} e) undoes the trivialization and ι is the conormal chart.
    """
    pi: BivectorField
    action: GroupAction
    td: TransversalData
    cc: ConormalChart
    spray: SprayField
    trivialization: EquivariantTrivialization
    darboux: np.ndarray
    parameters: np.ndarray
    moser: MoserField
    nodes: int = 16
    steps: int = 64
    moser_steps: int = 8
    records: List[CheckRecord] = field(default_factory=list)
    sigma_table: Optional[SigmaTable] = None

    def __post_init__(self):
        if self.sigma_table is None:
            self.sigma_table = SigmaTable(self.spray, self.cc, self.nodes, self.steps)

    @property
    def rank(self) -> int:
        return self.darboux.shape[0]

    @property
    def k(self) -> int:
        return self.td.parameter_dimension

    def _params(self, y: np.ndarray) -> np.ndarray:
        return y if self.k else np.zeros((y.shape[0], 0))

    def theta(self, w, with_jacobian: bool = False):
        """(y, e) ↦ (y, Φ_y^{-1} e), with its Jacobian on request."""
        w = np.array(w, dtype=float, ndmin=2)
        k = self.k
        y, e = w[:, :k], w[:, k:]
        if with_jacobian:
            phi, d_phi = self.trivialization.evaluate(self._params(y), with_derivative=True)
        else:
            phi, d_phi = self.trivialization.evaluate(self._params(y)), None
        phi_inv = np.linalg.inv(phi) if self.rank else phi
        f = np.einsum("bij,bj->bi", phi_inv, e)
        z = np.hstack([y, f])
        if not with_jacobian:
            return z
        batch, n = w.shape
        jacobian = np.zeros((batch, n, n))
        jacobian[:, :k, :k] = np.eye(k)
        jacobian[:, k:, k:] = phi_inv
        for m in range(k):
            jacobian[:, k:, m] = -np.einsum("bij,bj->bi", phi_inv @ d_phi[..., m], f)
        return z, jacobian

    def pulled_sigma(self, w) -> np.ndarray:
        """Θ*σ̃ on the (y, e) chart; NaN where the spray flows failed."""
        z, jacobian = self.theta(w, with_jacobian=True)
        sigma, _ = self.sigma_table(z)
        pulled = np.swapaxes(jacobian, 1, 2) @ sigma @ jacobian
        return 0.5 * (pulled - np.swapaxes(pulled, 1, 2))

    def constant_extension(self, w) -> np.ndarray:
        """ω̄ = the fibre form σ₀ extended constantly, zero elsewhere."""
        w = np.array(w, dtype=float, ndmin=2)
        result = np.zeros((w.shape[0], w.shape[1], w.shape[1]))
        result[:, self.k:, self.k:] = self.trivialization.reference
        return result

    def chart_map(self, u, with_jacobian: bool = False):
        """Ψ at a batch of (p, q, y) points, with dΨ on request; NaN rows where a flow failed."""
        u = np.array(u, dtype=float, ndmin=2)
        r, k = self.rank, self.k
        n = r + k
        embed = np.zeros((n, n))
        embed[:k, r:] = np.eye(k)
        embed[k:, :r] = self.darboux
        w0 = u @ embed.T
        moved = moser_batch(self.moser, w0, 0.0, 1.0, self.moser_steps, with_jacobian)
        z = self.theta(moved.states, with_jacobian)
        if with_jacobian:
            z, d_theta = z
        flows = flow_states(self.spray, self.cc.states(z), 1.0, self.steps, with_jacobian)
        alive = moved.alive & flows.alive
        images = np.where(alive[:, None], flows.states[:, :n], np.nan)
        if not with_jacobian:
            return images
        jacobian = flows.jacobians[:, :n] @ self.cc.inclusion_jacobian(z) @ d_theta @ moved.jacobians @ embed
        jacobian[~alive] = np.nan
        return images, jacobian

    def group_matrices(self) -> np.ndarray:
        """M_g = blockdiag(D^{-1} ρ_{x₀}(g) D, L_g): the action in (p, q, y) coordinates."""
        r, k = self.rank, self.k
        reference = self.trivialization.cocycle(self.trivialization.base)[0]
        blocks = np.zeros((self.action.order, r + k, r + k))
        if r:
            blocks[:, :r, :r] = np.linalg.solve(self.darboux, reference @ self.darboux)
        blocks[:, r:, r:] = self.parameters
        return blocks

    def verify(self, samples, tol: float = 1e-4, group_tol: float = 1e-8) -> SuiteResult:
        """Block structure of Ψ^*π at the samples and linearity of the conjugated group."""
        samples = np.array(samples, dtype=float, ndmin=2)
        r, k = self.rank, self.k
        images, jacobian = self.chart_map(samples, with_jacobian=True)
        ok = np.all(np.isfinite(images), axis=1)
        symplectic = np.full(len(samples), np.inf)
        cross = np.full(len(samples), np.inf)
        transversal = np.full(len(samples), np.inf)
        if np.any(ok):
            targets = self.pi.matrix(images[ok])
            inverse = np.linalg.inv(jacobian[ok])
            pulled = inverse @ targets @ np.swapaxes(inverse, 1, 2)
            induced = self.td.induced(self._params(samples[ok, r:]))
            symplectic[ok] = np.max(np.abs(pulled[:, :r, :r] - standard_bivector(r)).reshape(int(np.sum(ok)), -1),
                                    axis=1, initial=0.0)
            cross[ok] = np.max(np.abs(pulled[:, :r, r:]).reshape(int(np.sum(ok)), -1), axis=1, initial=0.0)
            transversal[ok] = np.max(np.abs(pulled[:, r:, r:] - induced).reshape(int(np.sum(ok)), -1),
                                     axis=1, initial=0.0)
        origin = self.td.induced(np.zeros((1, k)))[0]
        varpi = float(np.max(np.abs(origin), initial=0.0))

        blocks = self.group_matrices()
        off_block = float(np.max(np.abs(blocks[:, :r, r:]), initial=0.0)
                          + np.max(np.abs(blocks[:, r:, :r]), initial=0.0))
        equivariance = 0.0
        if not self.action.is_trivial:
            base_images = self.chart_map(samples)
            for g, m_g in zip(self.action.matrices, blocks):
                moved = self.chart_map(samples @ m_g.T)
                expected = self.action.fixed_point + (base_images - self.action.fixed_point) @ g.T
                equivariance = max(equivariance, worst(np.max(np.abs(moved - expected), axis=1)))
        rows = [ResidualRow(b, list(u[r:]), list(u[:r]), "split_cross", cross[b]) for b, u in enumerate(samples)]
        return SuiteResult([
            CheckRecord("split_symplectic_block", worst(symplectic), tol),
            CheckRecord("split_cross_block", worst(cross), tol),
            CheckRecord("split_transversal_block", worst(transversal), tol),
            CheckRecord("split_varpi_origin", varpi, group_tol),
            CheckRecord("split_group_blocks", off_block, group_tol),
            CheckRecord("split_group_linear", equivariance, group_tol),
        ], rows)


def weinstein_split(pi: BivectorField, x0, action: Optional[GroupAction] = None, fiber_radius: float = 0.1,
                    half_width: float = 0.1, nodes: int = 16, steps: int = 64, moser_steps: int = 8,
                    primitive_nodes: int = 8, h: float = 1e-5, spray: Optional[SprayField] = None,
                    check_points=None) -> WeinsteinSplit:
    """
    Build the splitting chart around the fixed point x₀.

    The steps are: an invariant transversal X; an invariant spray and its
    closed extension σ̃ on N*X; the equivariant trivialization Φ of N*X
    with fibre form σ₀ = −w_X(x₀); the Moser isotopy from the constant
    extension of σ₀ to Θ*σ̃; a Darboux basis of σ₀.

    Raises:
        GroupActionError, RankOddity, NotTransversal, NotInvertible, SpectrumOnCut
    """
    x0 = np.asarray(x0, dtype=float)
    n = pi.dimension
    action = action or GroupAction.trivial(n, x0)
    if np.max(np.abs(action.fixed_point - x0)) > INVARIANCE_TOL:
        raise GroupActionError("Group fixed point differs from the splitting point")
    probes = np.vstack([x0[None], np.atleast_2d(check_points)]) if check_points is not None else x0[None]
    records = [CheckRecord("group_preserves_pi", action.check_poisson(pi, probes), INVARIANCE_TOL)]

    embedding = invariant_transversal(pi, action, x0, half_width)
    td = TransversalData(pi, embedding)
    k, r = td.parameter_dimension, td.codimension
    parameters = parameter_action(td, action)
    base_spray = spray or SprayField(pi, CotangentChart(pi.box, 4.0 * max(1.0, np.sqrt(r)) * fiber_radius),
                                     None, pi.name)
    s = invariant_spray(pi, action, spray=base_spray)
    cc = conormal_chart(td, 2.0 * fiber_radius)

    def sigma(y):
        pairing, derivative = td.pairing_with_derivative(y)
        return -pairing, -derivative

    cocycle = conormal_cocycle(td, action, parameters)
    triv = equivariant_trivialization(sigma, action, cocycle, np.zeros(k))
    darboux = darboux_basis(triv.reference) if r else np.zeros((0, 0))

    w_bounds = (embedding.source.bounds if k else ()) + ((-fiber_radius, fiber_radius),) * r
    w_box = ChartBox("split", w_bounds)
    split = WeinsteinSplit(pi, action, td, cc, s, triv, darboux, parameters, None, nodes, steps, moser_steps)

    def model(sigma_fn):
        def evaluate(w):
            w = np.array(w, dtype=float, ndmin=2)
            matrices, _ = local_model_matrices(td.induced(split._params(w[:, :k])), sigma_fn(w))
            return matrices
        return evaluate

    def difference(w):
        return split.pulled_sigma(w) - split.constant_extension(w)

    path = NumericGaugePath(w_box, model(split.constant_extension),
                            lambda w: relative_primitive_batch(difference, k, w, primitive_nodes),
                            two_form=difference, h=h, name="split path")
    split.moser = MoserField(path)

    grid = np.zeros((1, k))
    if k:
        grid = np.vstack([np.zeros(k), np.eye(k) * half_width * 0.5])
    records.extend(triv.check(grid, parameters).records)
    covectors = 0.5 * fiber_radius * np.vstack([np.eye(n), -np.eye(n)])
    probe_states = np.hstack([np.tile(x0, (2 * n, 1)), covectors])
    records.append(CheckRecord("invariant_spray", spray_equivariance(s, action, probe_states, 1.0, min(steps, 16)), 1e-9))
    split.records = records
    logger.info(f"Splitting chart at {x0.tolist()}: symplectic rank {r}, transversal dimension {k}, "
                f"group {action.name!r} of order {action.order}")
    return split
