"""
Poisson transversals given as parametrized embeddings.

This module covers the transversality criteria, the splitting of π along X
into the induced bivector π_X and the conormal pairing w_X, the conormal
chart (y, f) ↦ (χ(y), N(y)f), the closed extension σ̃_𝒳 = −Ω_𝒳|_{N*X}, the
local model π(σ̃) and the verification that exp is a Poisson map from the
local model onto (M, π).
"""
import logging
from dataclasses import dataclass
from itertools import product
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import null_space, qr, subspace_angles
from scipy.optimize import least_squares

from core.services.dirac import (
    DiracFrame, dirac_gauge, dirac_graph_matrix, dirac_pullback, dirac_restrict, dirac_to_bivector,
)
from core.services.errors import (
    DomainEscape, FrameDegeneracy, NormalFormError, NotGraph, NotImmersion, NotOnTransversal,
    NotPoissonMap, NotTransversal, OutOfDomain,
)
from core.services.expressions import ChartBox, ExpressionField
from core.services.fields import BivectorField, jacobiator_numeric
from core.services.reports import (
    CheckRecord, ResidualRow, SuiteResult, failure_detail, probed_radius, worst,
)
from core.services.spray import SprayField, flow_states, omega_batch

logger = logging.getLogger(__name__)

RANK_TOL = 1e-8
GRAPH_TOL = 1e-8


class ChartMap:
    """
    Smooth map from a source box into an n-dimensional chart, by components.

    A map with no source box is constant (a point); its parameters have
    shape (B, 0).
    """

    def __init__(self, source: Optional[ChartBox], components, target: ChartBox,
                 name: str = "", constant: Optional[Sequence[float]] = None):
        self.source = source
        self.target = target
        self.name = name
        if source is None:
            if constant is None or len(constant) != target.dimension:
                raise NormalFormError(f"Constant map {name!r} needs a point in dimension {target.dimension}")
            self.point = np.asarray(constant, dtype=float)
            self.components: List[ExpressionField] = []
            return
        if len(components) != target.dimension:
            raise NormalFormError(
                f"Map {name!r} needs {target.dimension} components, got {len(components)}"
            )
        self.point = None
        self.components = [
            c if isinstance(c, ExpressionField) else ExpressionField(c, source) for c in components
        ]

    @property
    def parameter_dimension(self) -> int:
        return 0 if self.source is None else self.source.dimension

    @property
    def dimension(self) -> int:
        return self.target.dimension

    def _parameters(self, params) -> np.ndarray:
        if self.source is None:
            params = np.asarray(params, dtype=float)
            count = 1 if params.ndim < 2 else params.shape[0]
            return np.zeros((count, 0))
        return self.source.require(params)

    def jet(self, params, order: int = 1):
        """(values (B,n), derivative (B,n,k), second derivative (B,n,k,k))."""
        params = self._parameters(params)
        batch, k = params.shape
        n = self.dimension
        if self.source is None:
            return (np.tile(self.point, (batch, 1)),
                    np.zeros((batch, n, 0)) if order >= 1 else None,
                    np.zeros((batch, n, 0, 0)) if order >= 2 else None)
        values = np.zeros((batch, n))
        first = np.zeros((batch, n, k)) if order >= 1 else None
        second = np.zeros((batch, n, k, k)) if order >= 2 else None
        for i, component in enumerate(self.components):
            result = component.jet(params, order)
            values[:, i] = result.value
            if first is not None:
                first[:, i] = result.grad
            if second is not None:
                second[:, i] = result.hess
        return values, first, second

    def evaluate(self, params) -> np.ndarray:
        return self.jet(params, order=0)[0]

    def derivative(self, params) -> np.ndarray:
        return self.jet(params, order=1)[1]

    def as_strings(self) -> List[str]:
        return [str(c) for c in self.components]


class Embedding(ChartMap):
    """Parametrized submanifold χ from a k-box into the ambient chart."""

    @classmethod
    def at_point(cls, ambient: ChartBox, point, name: str = "point") -> "Embedding":
        return cls(None, [], ambient, name, constant=point)

    @classmethod
    def affine(cls, ambient: ChartBox, origin, directions, parameters: ChartBox,
               name: str = "affine") -> "Embedding":
        """x₀ + W·y, W of shape (n, k)."""
        origin = np.asarray(origin, dtype=float)
        directions = np.asarray(directions, dtype=float)
        components = [
            ExpressionField.affine(origin[i], directions[i], parameters)
            for i in range(ambient.dimension)
        ]
        return cls(parameters, components, ambient, name)

    @property
    def ambient(self) -> ChartBox:
        return self.target

    @property
    def center(self) -> np.ndarray:
        return np.zeros(0) if self.source is None else self.source.center

    def check(self, params) -> None:
        """
        Immersion and image-in-chart at the given parameters.

        Raises:
            NotImmersion: If dχ has rank below k somewhere.
            OutOfDomain: If an image point leaves the ambient chart.
        """
        values, first, _ = self.jet(params, order=1)
        inside = self.ambient.contains(values)
        if not np.all(inside):
            raise OutOfDomain(
                f"Embedding {self.name!r} leaves chart {self.ambient.name!r}",
                point=values[int(np.argmin(inside))].tolist(),
            )
        k = self.parameter_dimension
        if k == 0:
            return
        singular = np.linalg.svd(first, compute_uv=False)
        bad = singular[:, -1] <= RANK_TOL * np.maximum(singular[:, 0], 1e-300)
        if np.any(bad):
            params = self._parameters(params)
            raise NotImmersion(
                f"Embedding {self.name!r} is not an immersion at y={params[int(np.argmax(bad))].tolist()}",
                parameter=params[int(np.argmax(bad))].tolist(),
            )

    def locate(self, x) -> np.ndarray:
        """
        Parameters of the image point nearest to x.

        Raises:
            NotOnTransversal: If x is farther than 1e-8 from the image.
        """
        x = np.asarray(x, dtype=float)
        if self.source is None:
            if np.max(np.abs(x - self.point)) > 1e-8:
                raise NotOnTransversal(f"{x.tolist()} is not the point {self.point.tolist()}")
            return np.zeros(0)
        fit = least_squares(
            lambda y: self.evaluate(np.clip(y, self.source.lower, self.source.upper))[0] - x,
            self.center, bounds=(self.source.lower, self.source.upper),
            xtol=1e-15, ftol=1e-15, gtol=1e-15,
        )
        if np.max(np.abs(fit.fun)) > 1e-8:
            raise NotOnTransversal(
                f"{np.array2string(x, precision=6)} is not on {self.name!r} (miss {np.max(np.abs(fit.fun)):.3e})",
                point=x.tolist(),
            )
        return fit.x


def _signed_qr(matrices: np.ndarray):
    q, r = np.linalg.qr(matrices)
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs[signs == 0.0] = 1.0
    return q * signs[..., None, :], r * signs[..., :, None]


def _annihilator_projector(tangent: np.ndarray) -> np.ndarray:
    """I − D (DᵀD)^{-1} Dᵀ for a stack of n×k tangent frames."""
    n, k = tangent.shape[-2:]
    if k == 0:
        return np.broadcast_to(np.eye(n), tangent.shape[:-2] + (n, n)).copy()
    gram = np.swapaxes(tangent, -1, -2) @ tangent
    return np.eye(n) - tangent @ np.linalg.solve(gram, np.swapaxes(tangent, -1, -2))


@dataclass
class TransversalFrames:
    """
    Frames and splitting at a batch of parameters.

    Attributes:
        params, points: Parameters y (B,k) and image points χ(y) (B,n).
        tangent: dχ (B,n,k).
        conormal: Orthonormal conormal frame N (B,n,r).
        bivector: π(χ(y)) (B,n,n).
        induced: π_X (B,k,k).
        pairing: w_X = Nᵀ π N (B,r,r).
        injectivity, intersection, decomposition: The three criteria margins.
        mixed: Largest mixed (TX, π♯N*X) component of π in the adapted basis.
    """
    params: np.ndarray
    points: np.ndarray
    tangent: np.ndarray
    conormal: np.ndarray
    bivector: np.ndarray
    induced: np.ndarray
    pairing: np.ndarray
    injectivity: np.ndarray
    intersection: np.ndarray
    decomposition: np.ndarray
    mixed: np.ndarray


class TransversalData:
    """
    A candidate Poisson transversal: bivector, embedding and conormal reference.

    The conormal reference is a fixed set of coordinate covectors chosen at
    the center of the parameter box by pivoted QR, so N(y) is the
    Gram–Schmidt orthonormalization of their projections onto the
    annihilator of dχ(y), taken in ascending coordinate order.
    """

    def __init__(self, bivector: BivectorField, embedding: Embedding):
        if bivector.dimension != embedding.dimension:
            raise NormalFormError("Bivector and embedding live on different charts")
        self.bivector = bivector
        self.embedding = embedding
        n, k = embedding.dimension, embedding.parameter_dimension
        self.codimension = n - k
        centre = embedding.derivative(embedding.center)[0] if k else np.zeros((n, 0))
        projector = _annihilator_projector(centre)
        _, _, pivots = qr(projector, pivoting=True)
        chosen = sorted(int(p) for p in pivots[: self.codimension])
        self.reference = np.eye(n)[:, chosen]
        self._frames: Dict[tuple, TransversalFrames] = {}

    @property
    def dimension(self) -> int:
        return self.embedding.dimension

    @property
    def parameter_dimension(self) -> int:
        return self.embedding.parameter_dimension

    def conormal_frames(self, params, with_derivative: bool = False):
        """
        Conormal frames N(y) (B,n,r) and, on request, ∂_y N (B,n,r,k), exact.

        Raises:
            FrameDegeneracy: If the projected reference covectors lose rank.
        """
        order = 2 if with_derivative else 1
        _, tangent, curvature = self.embedding.jet(params, order=order)
        batch, n, k = tangent.shape
        r = self.codimension
        if r == 0:
            frames = np.zeros((batch, n, 0))
            return (frames, np.zeros((batch, n, 0, k))) if with_derivative else frames
        projector = _annihilator_projector(tangent)
        projected = projector @ self.reference
        q, rr = _signed_qr(projected)
        diagonal = np.abs(np.diagonal(rr, axis1=-2, axis2=-1))
        bad = np.min(diagonal, axis=1) < RANK_TOL
        if np.any(bad):
            y = self.embedding._parameters(params)[int(np.argmax(bad))]
            raise FrameDegeneracy(
                f"Reference coframe degenerates at y={y.tolist()}; shrink the parameter box",
                parameter=y.tolist(),
            )
        if not with_derivative:
            return q
        derivative = np.zeros((batch, n, r, k))
        if k:
            gram_inverse = np.linalg.inv(np.swapaxes(tangent, 1, 2) @ tangent)
            r_inverse = np.linalg.inv(rr)
            eye = np.eye(n)
            for m in range(k):
                d_tangent = curvature[:, :, :, m]
                d_gram = np.swapaxes(d_tangent, 1, 2) @ tangent + np.swapaxes(tangent, 1, 2) @ d_tangent
                d_projector = -(d_tangent @ gram_inverse @ np.swapaxes(tangent, 1, 2)
                                + tangent @ gram_inverse @ np.swapaxes(d_tangent, 1, 2)
                                - tangent @ gram_inverse @ d_gram @ gram_inverse @ np.swapaxes(tangent, 1, 2))
                d_a = d_projector @ self.reference
                c = np.swapaxes(q, 1, 2) @ d_a @ r_inverse
                lower = np.tril(c, -1)
                d_q = q @ (lower - np.swapaxes(lower, 1, 2)) + (eye - q @ np.swapaxes(q, 1, 2)) @ d_a @ r_inverse
                derivative[:, :, :, m] = d_q
        return q, derivative

    def frames(self, params) -> TransversalFrames:
        """Frames, splitting and criteria at a batch of parameters (no transversality raised)."""
        params = self.embedding._parameters(params)
        points, tangent, _ = self.embedding.jet(params, order=1)
        conormal = self.conormal_frames(params)
        pis = self.bivector.matrix(points)
        batch, n, k = tangent.shape
        r = n - k
        images = pis @ conormal
        adapted = np.concatenate([tangent, images], axis=2)
        scale = np.maximum(1.0, np.linalg.norm(pis, 2, axis=(1, 2)))

        injectivity = np.ones(batch)
        intersection = np.ones(batch)
        if r:
            injectivity = np.linalg.svd(images, compute_uv=False)[:, -1] / scale
        if r and k:
            for b in range(batch):
                if injectivity[b] > RANK_TOL:
                    intersection[b] = float(np.min(np.sin(subspace_angles(tangent[b], images[b]))))
                else:
                    intersection[b] = 0.0
        singular = np.linalg.svd(adapted, compute_uv=False)
        decomposition = singular[:, -1] / np.maximum(singular[:, 0], 1e-300)

        induced = np.full((batch, k, k), np.nan)
        mixed = np.full(batch, np.nan)
        good = decomposition > RANK_TOL
        if np.any(good):
            inverse = np.linalg.inv(adapted[good])
            q = inverse @ pis[good] @ np.swapaxes(inverse, 1, 2)
            induced[good] = 0.5 * (q[:, :k, :k] - np.swapaxes(q[:, :k, :k], 1, 2))
            mixed[good] = np.max(np.abs(q[:, :k, k:]).reshape(int(np.sum(good)), -1), axis=1, initial=0.0) \
                / scale[good]
        pairing = np.swapaxes(conormal, 1, 2) @ pis @ conormal
        return TransversalFrames(params, points, tangent, conormal, pis, induced, pairing,
                                 injectivity, intersection, decomposition, mixed)

    def require(self, params) -> TransversalFrames:
        """
        Frames at the parameters, raising if transversality fails anywhere.

        Raises:
            NotTransversal: With the parameter and the smallest singular value.
        """
        frames = self.frames(params)
        bad = frames.decomposition <= RANK_TOL
        if np.any(bad):
            index = int(np.argmax(bad))
            raise NotTransversal(
                f"X is not transversal at y={frames.params[index].tolist()} "
                f"(σ_min of [T | π♯N] relative {frames.decomposition[index]:.3e})",
                parameter=frames.params[index].tolist(),
                singular_value=float(frames.decomposition[index]),
            )
        return frames

    def induced(self, params) -> np.ndarray:
        """π_X at a batch of parameters."""
        return self.require(params).induced

    def pairing_with_derivative(self, params):
        """w_X (B,r,r) and ∂_y w_X (B,r,r,k), exact."""
        points, tangent, _ = self.embedding.jet(params, order=1)
        conormal, d_conormal = self.conormal_frames(params, with_derivative=True)
        pis, grads, _ = self.bivector.jet(points, order=1)
        pairing = np.swapaxes(conormal, 1, 2) @ pis @ conormal
        k = tangent.shape[2]
        derivative = np.zeros(pairing.shape + (k,))
        for m in range(k):
            d_pi = np.einsum("bijl,bl->bij", grads, tangent[:, :, m])
            d_n = d_conormal[:, :, :, m]
            derivative[..., m] = (np.swapaxes(d_n, 1, 2) @ pis @ conormal
                                  + np.swapaxes(conormal, 1, 2) @ d_pi @ conormal
                                  + np.swapaxes(conormal, 1, 2) @ pis @ d_n)
        return pairing, derivative

    def locate(self, x) -> np.ndarray:
        return self.embedding.locate(x)


def transversal_criteria(pi: BivectorField, e: Embedding, y) -> Dict[str, float]:
    """The three pointwise transversality criteria at one parameter, as margins."""
    frames = TransversalData(pi, e).frames(np.asarray(y, dtype=float).reshape(1, -1))
    return {
        "injectivity": float(frames.injectivity[0]),
        "intersection": float(frames.intersection[0]),
        "decomposition": float(frames.decomposition[0]),
    }


def check_transversal(pi: BivectorField, e: Embedding, params) -> TransversalData:
    """
    Build TransversalData after checking immersion and transversality at the samples.

    Raises:
        NotImmersion, NotTransversal
    """
    params = e._parameters(params) if e.parameter_dimension else np.zeros((1, 0))
    e.check(params)
    td = TransversalData(pi, e)
    frames = td.require(params)
    for b in range(frames.params.shape[0]):
        td._frames[tuple(frames.params[b])] = TransversalFrames(
            *(getattr(frames, f)[b:b + 1] for f in TransversalFrames.__dataclass_fields__)
        )
    logger.info(f"{e.name!r} is transversal for {pi.name!r} at {frames.params.shape[0]} parameters")
    return td


def split_restriction(pi: BivectorField, td: TransversalData, y):
    """
    π|_X = π_X + w_X at one parameter.

    Returns:
        (π_X (k×k), w_X (r×r))

    Raises:
        NormalFormError: If td was built for another bivector.
        NotTransversal
    """
    if pi is not td.bivector:
        raise NormalFormError(f"Transversal data belongs to {td.bivector.name!r}, not {pi.name!r}")
    y = np.asarray(y, dtype=float).reshape(1, -1)
    cached = td._frames.get(tuple(y[0]))
    frames = cached if cached is not None else td.require(y)
    return frames.induced[0], frames.pairing[0]


def induced_jacobiator(td: TransversalData, y, h: float = 1e-5) -> float:
    """Finite-differenced Jacobiator of y ↦ π_X(y), as a max residual."""
    if td.parameter_dimension < 3:
        return 0.0
    tensor = jacobiator_numeric(td.induced, y, h, td.embedding.source)
    return float(np.max(np.abs(tensor)))


class ConormalChart:
    """
    Coordinates (y, f) on N*X: (y, f) ↦ (χ(y), Σ_a f_a N_a(y)).

    The chart box is the parameter box times [−ρ, ρ]^r.
    """

    def __init__(self, td: TransversalData, fiber_bound: float):
        self.td = td
        self.fiber_bound = float(fiber_bound)
        self.k = td.parameter_dimension
        self.r = td.codimension
        source = td.embedding.source
        bounds = (source.bounds if source is not None else ()) + ((-self.fiber_bound, self.fiber_bound),) * self.r
        self.box = ChartBox(f"N*{td.embedding.name}", bounds) if bounds else None

    @property
    def dimension(self) -> int:
        return self.k + self.r

    def split(self, z) -> tuple:
        z = np.array(z, dtype=float, ndmin=2)
        return z[:, : self.k], z[:, self.k:]

    def states(self, z) -> np.ndarray:
        """Ambient cotangent states (x, ξ) of chart points, shape (B, 2n)."""
        y, f = self.split(z)
        points = self.td.embedding.evaluate(y if self.k else np.zeros((y.shape[0], 0)))
        frames = self.td.conormal_frames(y if self.k else np.zeros((y.shape[0], 0)))
        return np.hstack([points, np.einsum("bia,ba->bi", frames, f)])

    def inclusion_jacobian(self, z) -> np.ndarray:
        """dι = [[dχ, 0], [∂_y(N f), N]], shape (B, 2n, n)."""
        y, f = self.split(z)
        batch = y.shape[0]
        n = self.td.dimension
        y_param = y if self.k else np.zeros((batch, 0))
        tangent = self.td.embedding.derivative(y_param)
        frames, d_frames = self.td.conormal_frames(y_param, with_derivative=True)
        jacobian = np.zeros((batch, 2 * n, n))
        jacobian[:, :n, : self.k] = tangent
        jacobian[:, n:, : self.k] = np.einsum("biam,ba->bim", d_frames, f)
        jacobian[:, n:, self.k:] = frames
        return jacobian

    def frame_continuity(self, params, delta: float = 1e-4) -> float:
        """max |N(y+δe) − N(y)| / δ over coordinate directions: a Lipschitz estimate."""
        if self.k == 0 or self.r == 0:
            return 0.0
        params = np.array(params, dtype=float, ndmin=2)
        base = self.td.conormal_frames(params)
        worst_ratio = 0.0
        for m in range(self.k):
            shifted = params.copy()
            shifted[:, m] = np.clip(shifted[:, m] + delta, *self.td.embedding.source.bounds[m])
            step = np.abs(shifted[:, m] - params[:, m])
            moved = step > 0
            if not np.any(moved):
                continue
            change = np.linalg.norm(self.td.conormal_frames(shifted[moved]) - base[moved], axis=(1, 2))
            worst_ratio = max(worst_ratio, float(np.max(change / step[moved])))
        return worst_ratio


def conormal_chart(td: TransversalData, fiber_bound: float, grid: int = 3) -> ConormalChart:
    """
    Conormal chart over the whole parameter box.

    The frame and transversality are checked on a grid of parameters
    (corners, midpoints, center).

    Raises:
        FrameDegeneracy, NotTransversal
    """
    k = td.parameter_dimension
    if k:
        source = td.embedding.source
        axes = [np.linspace(lo, hi, grid) for lo, hi in source.bounds]
        params = np.array(list(product(*axes)))
    else:
        params = np.zeros((1, 0))
    td.require(params)
    return ConormalChart(td, fiber_bound)


def sigma_batch(s: SprayField, cc: ConormalChart, z, nodes: int = 16, steps: int = 64):
    """σ̃_𝒳 = −dιᵀ Ω_𝒳 dι at a batch of chart points; returns (σ̃ (B,n,n), alive)."""
    z = np.array(z, dtype=float, ndmin=2)
    omegas, alive = omega_batch(s, cc.states(z), nodes, steps)
    inclusion = cc.inclusion_jacobian(z)
    sigma = -np.swapaxes(inclusion, 1, 2) @ omegas @ inclusion
    return 0.5 * (sigma - np.swapaxes(sigma, 1, 2)), alive


def sigma_tilde(s: SprayField, cc: ConormalChart, z, nodes: int = 16, steps: int = 64) -> np.ndarray:
    """
    The closed extension σ̃_𝒳 at one point of the conormal chart.

    Raises:
        DomainEscape
    """
    sigma, alive = sigma_batch(s, cc, z, nodes, steps)
    if not alive[0]:
        raise DomainEscape(f"Flows from chart point {np.asarray(z).tolist()} leave the chart",
                           location=np.asarray(z, dtype=float).tolist())
    return sigma[0]


class SigmaTable:
    """
    σ̃_𝒳 memoized by exact chart coordinates.

    Calling the table returns (σ̃ (B,n,n), alive (B,)) like `sigma_batch`;
    only points not seen before are flowed.
    """

    def __init__(self, s: SprayField, cc: ConormalChart, nodes: int = 16, steps: int = 64):
        self.spray = s
        self.cc = cc
        self.nodes = nodes
        self.steps = steps
        self.hits = 0
        self._cache: Dict[bytes, tuple] = {}

    def __len__(self) -> int:
        return len(self._cache)

    def __call__(self, z):
        z = np.array(z, dtype=float, ndmin=2)
        keys = [row.tobytes() for row in z]
        pending = {}
        for key, row in zip(keys, z):
            if key not in self._cache and key not in pending:
                pending[key] = row
        if pending:
            sigma, alive = sigma_batch(self.spray, self.cc, np.array(list(pending.values())),
                                       self.nodes, self.steps)
            for key, value, ok in zip(pending, sigma, alive):
                self._cache[key] = (value, bool(ok))
        self.hits += len(keys) - len(pending)
        n = self.cc.dimension
        if not keys:
            return np.zeros((0, n, n)), np.zeros(0, dtype=bool)
        entries = [self._cache[key] for key in keys]
        return np.array([value for value, _ in entries]), np.array([ok for _, ok in entries])

    def matrices(self, z) -> np.ndarray:
        return self(z)[0]


def local_model_matrices(induced: np.ndarray, sigma: np.ndarray):
    """
    π(σ̃) for stacks: the graph of π_X pulled back along (y, f) ↦ y, gauged by σ̃.

    Returns:
        (bivectors (B,n,n), graph margins (B,)); rows with margin below the
        graph tolerance are NaN.
    """
    batch, n, _ = sigma.shape
    k = induced.shape[-1]
    tangent = np.zeros((batch, n, n))
    tangent[:, :k, :k] = induced
    tangent[:, k:, k:] = np.eye(n - k)
    cotangent = np.zeros((batch, n, n))
    cotangent[:, :k, :k] = np.eye(k)
    cotangent = cotangent + sigma @ tangent
    stacked = np.concatenate([tangent, cotangent], axis=1)
    margin = np.linalg.svd(cotangent, compute_uv=False)[:, -1] / np.linalg.norm(stacked, 2, axis=(1, 2))
    result = np.full((batch, n, n), np.nan)
    good = margin >= GRAPH_TOL
    if np.any(good):
        solved = np.swapaxes(np.linalg.solve(np.swapaxes(cotangent[good], 1, 2),
                                             np.swapaxes(tangent[good], 1, 2)), 1, 2)
        result[good] = 0.5 * (solved - np.swapaxes(solved, 1, 2))
    return result, margin


def local_model_bivector(td: TransversalData, cc: ConormalChart, sigma: Callable, z) -> np.ndarray:
    """
    π(σ̃)(z) through Dirac frames: pullback of L_{π_X} along the bundle
    projection, gauged by σ̃(z).

    Args:
        sigma: Maps a batch of chart points to σ̃ matrices.

    Raises:
        NotGraph: If z lies outside the open set where the gauged pullback is Poisson.
    """
    z = np.asarray(z, dtype=float)
    k, n = cc.k, cc.dimension
    y = z[:k]
    if k:
        base = dirac_graph_matrix(td.induced(y.reshape(1, -1))[0], y)
        pulled = dirac_pullback(base, np.hstack([np.eye(k), np.zeros((k, n - k))]), z)
    else:
        pulled = DiracFrame(np.eye(n), np.zeros((n, n)), z)
    gauged = dirac_gauge(pulled, np.asarray(sigma(z.reshape(1, -1)))[0])
    return dirac_to_bivector(gauged)


def local_model_symplectic(omega_x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """(σ̃ + p*ω_X)^{-1}, the local model when X is symplectic."""
    omega_x = np.asarray(omega_x, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    k = omega_x.shape[0]
    pulled = np.zeros_like(sigma)
    pulled[:k, :k] = omega_x
    return np.linalg.inv(sigma + pulled)


def numerical_rank(matrix: np.ndarray, tol: float = RANK_TOL) -> int:
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0
    return int(np.sum(singular > tol * singular[0]))


def local_model_rank(model: np.ndarray, induced: np.ndarray) -> int:
    """rank π(σ̃)(z) − (rank π_X(p(z)) + codimension); zero when the leaf structure matches."""
    n, k = model.shape[0], induced.shape[0]
    return numerical_rank(model) - (numerical_rank(induced) + n - k)


def verify_normal_form(pi: BivectorField, td: TransversalData, cc: ConormalChart, s: SprayField,
                       samples, tol: float = 1e-4, nodes: int = 16, steps: int = 64,
                       identity_tol: float = 1e-10) -> SuiteResult:
    """
    exp_𝒳: (N*X, π(σ̃_𝒳)) → (M, π) is Poisson at the samples, and the identity on X.

    At each chart point z, A = d(exp ∘ ι)(z) and the residual is
    |A·π(σ̃)(z)·Aᵀ − π(exp z)| relative to max(1, |π|).
    """
    samples = np.array(samples, dtype=float, ndmin=2)
    k, n = cc.k, cc.dimension
    errors: Dict[int, Exception] = {}

    sigma, alive = sigma_batch(s, cc, samples, nodes, steps)
    frames = td.frames(samples[:, :k])
    induced = frames.induced
    transversal = frames.decomposition > RANK_TOL
    models = np.full((len(samples), n, n), np.nan)
    margins = np.zeros(len(samples))
    usable = transversal & alive
    if np.any(usable):
        models[usable], margins[usable] = local_model_matrices(induced[usable], sigma[usable])
    states = cc.states(samples)
    flows = flow_states(s, states, 1.0, steps)
    alive &= flows.alive
    inclusion = cc.inclusion_jacobian(samples)

    residual = np.full(len(samples), np.inf)
    rank_gap = np.full(len(samples), np.inf)
    for b in range(len(samples)):
        if not transversal[b]:
            errors[b] = NotTransversal(
                f"X is not transversal at y={frames.params[b].tolist()} "
                f"(σ_min of [T | π♯N] relative {frames.decomposition[b]:.3e})",
                parameter=frames.params[b].tolist(),
                singular_value=float(frames.decomposition[b]),
            )
            continue
        if not alive[b]:
            errors[b] = NormalFormError("Flow left the chart")
            continue
        if margins[b] < GRAPH_TOL:
            errors[b] = NotGraph(f"Local model is not Poisson at {samples[b].tolist()}")
            continue
        a = flows.jacobians[b][:n] @ inclusion[b]
        target = pi.at(flows.states[b, :n])
        scale = max(1.0, float(np.max(np.abs(target))))
        residual[b] = float(np.max(np.abs(a @ models[b] @ a.T - target))) / scale
        rank_gap[b] = abs(local_model_rank(models[b], induced[b]))

    zero = np.hstack([samples[:, :k], np.zeros((len(samples), n - k))])
    zero_flows = flow_states(s, cc.states(zero), 1.0, steps, with_jacobian=False)
    identity = np.where(zero_flows.alive,
                        np.max(np.abs(zero_flows.states[:, :n] - frames.points), axis=1, initial=0.0),
                        np.inf)

    ok = np.isfinite(residual)
    radius = probed_radius(np.linalg.norm(samples[:, k:], axis=1), ok)
    detail = failure_detail(errors)
    rows = []
    for b, z in enumerate(samples):
        rows.append(ResidualRow(b, list(z[:k]), list(z[k:]), "normal_form", residual[b]))
        rows.append(ResidualRow(b, list(z[:k]), list(z[k:]), "identity_on_x", identity[b]))
    records = [
        CheckRecord("normal_form", worst(residual), tol, probed_radius=radius, detail=detail),
        CheckRecord("identity_on_x", worst(identity), identity_tol),
        CheckRecord("leaf_rank", worst(rank_gap), 0.5, detail=detail),
        CheckRecord("mixed_component", worst(frames.mixed), 1e-10, detail=detail),
    ]
    logger.info(f"Normal form of {pi.name!r} along {td.embedding.name!r}: "
                f"residual {records[0].residual:.3e}, radius {radius}")
    return SuiteResult(records, rows)


def check_transversal_suite(pi: BivectorField, td: TransversalData, params,
                            h: float = 1e-5) -> SuiteResult:
    """Criteria agreement, mixed components and the π_X Jacobiator at sample parameters."""
    params = np.array(params, dtype=float, ndmin=2)
    frames = td.frames(params)
    criteria = np.vstack([frames.injectivity, frames.intersection, frames.decomposition]) > RANK_TOL
    disagreement = np.any(criteria != criteria[0], axis=0).astype(float)
    jacobi = np.array([induced_jacobiator(td, y, h) for y in params]) if np.all(criteria[2]) \
        else np.full(len(params), np.inf)
    rows = [ResidualRow(b, list(y), [], "decomposition", frames.decomposition[b])
            for b, y in enumerate(params)]
    return SuiteResult([
        CheckRecord("transversality", 0.0 if np.all(criteria[2]) else float("inf"), 0.0,
                    detail=f"min decomposition margin {float(np.min(frames.decomposition)):.3e}"),
        CheckRecord("criteria_agree", worst(disagreement), 0.0),
        CheckRecord("mixed_component", worst(frames.mixed), 1e-10),
        CheckRecord("induced_jacobiator", worst(jacobi), 1e-4),
    ], rows)


def check_pullback_transversal(phi: ChartMap, pi1: Callable, pi2: BivectorField, td2: TransversalData,
                               points, tol: float = 1e-8) -> SuiteResult:
    """
    Preimages of a transversal under a Poisson map.

    Args:
        phi: The map, defined on the source chart.
        pi1: Maps a batch of source points to bivector matrices.
        pi2: Target bivector.
        td2: Transversal X₂ in the target.
        points: Source points with φ(x) on X₂.

    At each point: φ is Poisson (dφ π₁ dφᵀ = π₂∘φ), φ is transverse to X₂,
    φ^{-1}(X₂) is a Poisson transversal for π₁, and φ restricts to a Poisson
    map between the induced structures.
    """
    points = np.array(points, dtype=float, ndmin=2)
    images, d_phi, _ = phi.jet(points, order=1)
    pis1 = np.asarray(pi1(points))
    pis2 = pi2.matrix(images)
    k2 = td2.parameter_dimension

    poisson = np.max(np.abs(d_phi @ pis1 @ np.swapaxes(d_phi, 1, 2) - pis2), axis=(1, 2))
    transverse = np.full(len(points), np.inf)
    decomposition = np.full(len(points), np.inf)
    induced = np.full(len(points), np.inf)
    errors: Dict[int, Exception] = {}
    for b, x in enumerate(points):
        try:
            if poisson[b] > tol:
                raise NotPoissonMap(f"φ is not Poisson at {x.tolist()} (residual {poisson[b]:.3e})")
            y2 = td2.locate(images[b])
            frames2 = td2.require(y2.reshape(1, -1) if k2 else np.zeros((1, 0)))
            tangent2, conormal2 = frames2.tangent[0], frames2.conormal[0]
            combined = np.hstack([d_phi[b], tangent2])
            singular = np.linalg.svd(combined, compute_uv=False)
            n2 = combined.shape[0]
            transverse[b] = np.inf if singular.size < n2 or singular[n2 - 1] == 0.0 \
                else singular[0] / singular[n2 - 1]
            conormal1 = d_phi[b].T @ conormal2
            tangent1 = null_space(conormal1.T)
            adapted = np.hstack([tangent1, pis1[b] @ conormal1])
            singular = np.linalg.svd(adapted, compute_uv=False)
            margin = singular[-1] / singular[0]
            if margin <= RANK_TOL:
                raise NotTransversal(f"Preimage is not transversal at {x.tolist()}", singular_value=margin)
            decomposition[b] = 1.0 / margin
            inverse = np.linalg.inv(adapted)
            k1 = tangent1.shape[1]
            induced1 = (inverse @ pis1[b] @ inverse.T)[:k1, :k1]
            pushed = np.linalg.pinv(tangent2) @ d_phi[b] @ tangent1
            induced[b] = float(np.max(np.abs(pushed @ induced1 @ pushed.T - frames2.induced[0]), initial=0.0))
        except NormalFormError as e:
            errors[b] = e
    detail = failure_detail(errors)
    logger.info(f"Pullback of {td2.embedding.name!r} under {phi.name!r}: {len(errors)} failures")
    return SuiteResult([
        CheckRecord("poisson_map", worst(poisson), tol),
        CheckRecord("map_transverse", worst(transverse), 1.0 / RANK_TOL, detail=detail),
        CheckRecord("preimage_transversal", worst(decomposition), 1.0 / RANK_TOL, detail=detail),
        CheckRecord("induced_poisson_map", worst(induced), tol, detail=detail),
    ])


def check_model_consistency(td: TransversalData, cc: ConormalChart, sigma: Callable, samples,
                            tol: float = 1e-8) -> SuiteResult:
    """
    Cross-checks of the local model at a few chart points.

    π_X must equal the Dirac pullback of L_π along χ; π(σ̃) from the
    stacked formula must equal the Dirac-frame construction and, when π_X
    is invertible, (σ̃ + p*ω_X)^{-1}.
    """
    samples = np.array(samples, dtype=float, ndmin=2)
    k = cc.k
    sigmas = np.asarray(sigma(samples))
    frames = td.frames(samples[:, :k])
    transversal = frames.decomposition > RANK_TOL
    models = np.full(sigmas.shape, np.nan)
    if np.any(transversal):
        models[transversal], _ = local_model_matrices(frames.induced[transversal], sigmas[transversal])
    restricted, dirac, symplectic = [], [], []
    errors: Dict[int, Exception] = {}
    for b, z in enumerate(samples):
        try:
            if not transversal[b]:
                raise NotTransversal(f"X is not transversal at y={frames.params[b].tolist()}",
                                     parameter=frames.params[b].tolist(),
                                     singular_value=float(frames.decomposition[b]))
            if k:
                pulled = dirac_restrict(dirac_graph_matrix(frames.bivector[b]), frames.tangent[b])
                restricted.append(float(np.max(np.abs(dirac_to_bivector(pulled) - frames.induced[b]))))
            dirac.append(float(np.max(np.abs(local_model_bivector(td, cc, sigma, z) - models[b]))))
            if numerical_rank(frames.induced[b]) == k:
                omega_x = np.linalg.inv(frames.induced[b]) if k else np.zeros((0, 0))
                symplectic.append(float(np.max(np.abs(local_model_symplectic(omega_x, sigmas[b]) - models[b]))))
        except NormalFormError as e:
            errors[b] = e
            dirac.append(float("inf"))
    detail = failure_detail(errors)
    return SuiteResult([
        CheckRecord("induced_dirac", worst(restricted), tol, detail=detail),
        CheckRecord("model_dirac", worst(dirac), tol, detail=detail),
        CheckRecord("model_symplectic", worst(symplectic), tol, detail=detail),
    ])
