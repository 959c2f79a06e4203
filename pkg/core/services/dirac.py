"""
Pointwise Dirac structures as explicit frames.

A DiracFrame stores an n-column basis of a Lagrangian subspace
L ⊂ T_xM ⊕ T*_xM: the tangent block A and the cotangent block C, so L is
spanned by the columns of the stacked 2n×n matrix [A; C]. Pullback and
gauge are matrix assemblies on that basis.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import null_space, orth, subspace_angles

from core.services.errors import DiracFrameError, NotGraph, NotImmersion, NotSubmersion
from core.services.fields import BivectorField, antisymmetrize

logger = logging.getLogger(__name__)

ISOTROPY_TOL = 1e-10
RANK_TOL = 1e-8
GRAPH_TOL = 1e-8


def _relative_rank(matrix: np.ndarray, tol: float = RANK_TOL) -> int:
    singular = np.linalg.svd(matrix, compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0
    return int(np.sum(singular > tol * singular[0]))


@dataclass(frozen=True)
class DiracFrame:
    """
    Lagrangian subspace of T_xM ⊕ T*_xM given by a basis.

    Attributes:
        point: Base point in chart coordinates (may be None for purely linear use).
        tangent: Tangent block A (n×n).
        cotangent: Cotangent block C (n×n).
    """
    tangent: np.ndarray
    cotangent: np.ndarray
    point: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        a = np.asarray(self.tangent, dtype=float)
        c = np.asarray(self.cotangent, dtype=float)
        if a.ndim != 2 or a.shape != c.shape or a.shape[0] != a.shape[1]:
            raise DiracFrameError(
                f"Frame blocks must be square and of equal shape, got {a.shape} and {c.shape}"
            )
        object.__setattr__(self, "tangent", a)
        object.__setattr__(self, "cotangent", c)
        if self.point is not None:
            object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        if self.rank != self.dimension:
            raise DiracFrameError(
                f"Frame has rank {self.rank}, expected {self.dimension}", rank=self.rank
            )
        if self.isotropy_residual > ISOTROPY_TOL:
            raise DiracFrameError(
                f"Frame is not isotropic (residual {self.isotropy_residual:.3e})",
                residual=self.isotropy_residual,
            )

    @property
    def dimension(self) -> int:
        return self.tangent.shape[0]

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.tangent, self.cotangent])

    @property
    def scale(self) -> float:
        return float(np.linalg.norm(self.stacked, 2))

    @property
    def rank(self) -> int:
        return _relative_rank(self.stacked)

    @property
    def isotropy_residual(self) -> float:
        """max |AᵀC + CᵀA| after normalizing the frame to unit spectral norm."""
        scale = self.scale
        if scale == 0.0:
            return 0.0
        a, c = self.tangent / scale, self.cotangent / scale
        return float(np.max(np.abs(a.T @ c + c.T @ a), initial=0.0))

    def reframed(self, change: np.ndarray) -> "DiracFrame":
        """Same subspace, basis multiplied on the right by an invertible matrix."""
        return DiracFrame(self.tangent @ change, self.cotangent @ change, self.point)

    def distance(self, other: "DiracFrame") -> float:
        """Sine of the largest principal angle between the two subspaces."""
        if other.dimension != self.dimension:
            raise DiracFrameError("Frames of different dimension cannot be compared")
        angles = subspace_angles(self.stacked, other.stacked)
        return float(np.max(np.sin(angles), initial=0.0))


def dirac_graph_matrix(pi: np.ndarray, point=None) -> DiracFrame:
    """Graph {(π ξ, ξ)} of a bivector matrix."""
    pi = np.asarray(pi, dtype=float)
    return DiracFrame(pi.copy(), np.eye(pi.shape[0]), point)


def dirac_graph(pi: BivectorField, x) -> DiracFrame:
    """L_π at x: tangent block π(x), cotangent block the identity."""
    x = np.asarray(x, dtype=float)
    return dirac_graph_matrix(pi.at(x), x)


def two_form_graph(omega: np.ndarray, point=None) -> DiracFrame:
    """Graph {(v, ω v)} of a 2-form matrix."""
    omega = np.asarray(omega, dtype=float)
    return DiracFrame(np.eye(omega.shape[0]), omega.copy(), point)


def dirac_pullback(frame: DiracFrame, dp: np.ndarray, point=None) -> DiracFrame:
    """
    Pullback along a submersion p.

    Args:
        frame: L at p(z), dimension n_base.
        dp: Derivative of p at z, shape (n_base, n_total).
        point: The point z, kept on the returned frame.

    Returns:
        Frame spanning {(v, dpᵀξ) : (dp·v, ξ) ∈ L}.

    Raises:
        NotSubmersion: If dp has deficient row rank.
    """
    dp = np.atleast_2d(np.asarray(dp, dtype=float))
    n_base, n_total = dp.shape
    if n_base != frame.dimension:
        raise NotSubmersion(
            f"Derivative has {n_base} rows but the frame lives in dimension {frame.dimension}"
        )
    if n_base and _relative_rank(dp) < n_base:
        raise NotSubmersion(f"Derivative of shape {dp.shape} is not onto", rank=_relative_rank(dp))
    if n_base == 0:
        return DiracFrame(np.eye(n_total), np.zeros((n_total, n_total)), point)
    lift = np.linalg.pinv(dp) @ frame.tangent
    kernel = null_space(dp)
    tangent = np.hstack([lift, kernel])
    cotangent = np.hstack([dp.T @ frame.cotangent, np.zeros((n_total, kernel.shape[1]))])
    return DiracFrame(tangent, cotangent, point)


def dirac_restrict(frame: DiracFrame, di: np.ndarray, point=None) -> DiracFrame:
    """
    Pullback along an immersion i with derivative di (n×k).

    Returns:
        Frame spanning {(v, diᵀξ) : (di·v, ξ) ∈ L}, of dimension k.

    Raises:
        NotImmersion: If di has deficient column rank.
    """
    di = np.asarray(di, dtype=float)
    n, k = di.shape
    if n != frame.dimension:
        raise NotImmersion(f"Derivative has {n} rows but the frame lives in dimension {frame.dimension}")
    if _relative_rank(di) < k:
        raise NotImmersion(f"Derivative of shape {di.shape} is not injective")
    image = orth(di)
    outside = frame.tangent - image @ (image.T @ frame.tangent)
    coefficients = null_space(outside, rcond=RANK_TOL)
    candidates = np.vstack([
        np.linalg.pinv(di) @ frame.tangent @ coefficients,
        di.T @ frame.cotangent @ coefficients,
    ])
    basis = orth(candidates, rcond=RANK_TOL)
    if basis.shape[1] != k:
        raise DiracFrameError(
            f"Restriction spans dimension {basis.shape[1]}, expected {k}", rank=basis.shape[1]
        )
    return DiracFrame(basis[:k], basis[k:], point)


def dirac_gauge(frame: DiracFrame, b: np.ndarray) -> DiracFrame:
    """Gauge transform by a 2-form matrix: A' = A, C' = C + B·A."""
    b = antisymmetrize(b, "gauge 2-form")
    return DiracFrame(frame.tangent, frame.cotangent + b @ frame.tangent, frame.point)


def graph_margin(frame: DiracFrame) -> float:
    """σ_min(C) / σ_max([A; C]); the frame is a graph when this exceeds the graph tolerance."""
    scale = frame.scale
    if scale == 0.0:
        return 0.0
    return float(np.linalg.svd(frame.cotangent, compute_uv=False)[-1] / scale)


def dirac_to_bivector(frame: DiracFrame) -> np.ndarray:
    """
    Bivector A·C^{-1} whose graph is the frame.

    Raises:
        NotGraph: If the cotangent block is numerically singular.
    """
    margin = graph_margin(frame)
    if margin < GRAPH_TOL:
        point = None if frame.point is None else frame.point.tolist()
        raise NotGraph(
            f"Dirac structure is not a graph (margin {margin:.3e})"
            + ("" if point is None else f" at {point}"),
            margin=margin,
            point=point,
        )
    c = frame.cotangent
    result = np.linalg.solve(c.T, frame.tangent.T).T
    # Isotropy errors are amplified by C^{-1} on both sides.
    tolerance = ISOTROPY_TOL * max(1.0, np.linalg.cond(c)) ** 2
    return antisymmetrize(result, "graph bivector", tol=tolerance)
