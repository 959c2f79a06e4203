"""
Bivector fields, 2-forms and 1-forms on a chart, and their pointwise calculus.

Index conventions used throughout the package:

    (π♯ξ)^i = Σ_j π^{ij} ξ_j        sharp is the matrix product π·ξ
    (B♭X)_i = Σ_j B_{ij} X^j        flat is the matrix product B·X
    π^B     = π (I + B π)^{-1}      gauge transform by a closed 2-form

Antisymmetric fields store only their strictly-upper entries; the full matrix
is assembled on evaluation.
"""
import logging
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from core.services.errors import NormalFormError, OutOfDomain, SingularGauge
from core.services.expressions import ChartBox, ExpressionField, as_points

logger = logging.getLogger(__name__)

ANTISYMMETRY_TOL = 1e-10

# Largest condition number of I + B·π accepted by the gauge transform.
GAUGE_CONDITION_CAP = 1e12

MatrixFunction = Callable[[np.ndarray], np.ndarray]


def _parse_slot(key, dimension: int) -> Tuple[int, int]:
    """Turn a "i,j" key (one-based) or an (i, j) pair (zero-based) into a zero-based pair."""
    if isinstance(key, str):
        try:
            i, j = (int(part) - 1 for part in key.split(","))
        except ValueError:
            raise NormalFormError(f"Slot key {key!r} must look like 'i,j'")
    else:
        i, j = key
    if i == j:
        raise NormalFormError(f"Diagonal slot {key!r} is not allowed in an antisymmetric field")
    if not (0 <= i < dimension and 0 <= j < dimension):
        raise NormalFormError(f"Slot {key!r} is outside dimension {dimension}")
    return i, j


class AntisymmetricField:
    """
    Antisymmetric n×n array of expression fields, stored as its upper triangle.

    Attributes:
        box: Chart the entries live on.
        name: Label used in reports.
    """

    kind = "antisymmetric field"

    def __init__(self, box: ChartBox, entries: Mapping, name: str = ""):
        self.box = box
        self.name = name
        upper: Dict[Tuple[int, int], ExpressionField] = {}
        for key, value in entries.items():
            i, j = _parse_slot(key, box.dimension)
            field = value if isinstance(value, ExpressionField) else ExpressionField(value, box)
            if i > j:
                i, j, field = j, i, field.negated()
            if (i, j) in upper:
                raise NormalFormError(
                    f"Slot ({i + 1},{j + 1}) of {self.kind} {name!r} is given twice"
                )
            upper[(i, j)] = field
        self._entries = dict(sorted(upper.items()))

    @classmethod
    def constant(cls, box: ChartBox, matrix, name: str = ""):
        matrix = np.asarray(matrix, dtype=float)
        n = box.dimension
        if matrix.shape != (n, n):
            raise NormalFormError(f"Expected a {n}×{n} matrix, got shape {matrix.shape}")
        if np.max(np.abs(matrix + matrix.T), initial=0.0) > ANTISYMMETRY_TOL:
            raise NormalFormError(f"Constant {cls.kind} {name!r} is not antisymmetric")
        entries = {
            (i, j): ExpressionField.constant(matrix[i, j], box)
            for i in range(n) for j in range(i + 1, n) if matrix[i, j] != 0.0
        }
        return cls(box, entries, name)

    @classmethod
    def zero(cls, box: ChartBox, name: str = ""):
        return cls(box, {}, name)

    @property
    def dimension(self) -> int:
        return self.box.dimension

    @property
    def entries(self) -> Dict[Tuple[int, int], ExpressionField]:
        return dict(self._entries)

    @property
    def is_constant(self) -> bool:
        return all(field.is_constant for field in self._entries.values())

    def as_strings(self) -> Dict[str, str]:
        """Upper-triangular serialization, keys one-based."""
        return {f"{i + 1},{j + 1}": str(field) for (i, j), field in self._entries.items()}

    def negated(self):
        return type(self)(self.box, {key: f.negated() for key, f in self._entries.items()},
                          f"-{self.name}" if self.name else "")

    def jet(self, points, order: int = 1):
        """
        Matrix values and derivatives at a batch of points.

        Returns:
            (values, grads, hessians): shapes (B,n,n), (B,n,n,n) and (B,n,n,n,n),
            with grads[b,i,j,l] = ∂_l M_ij. Parts above the requested order are None.
        """
        points = self.box.require(points)
        batch, n = points.shape
        values = np.zeros((batch, n, n))
        grads = np.zeros((batch, n, n, n)) if order >= 1 else None
        hessians = np.zeros((batch, n, n, n, n)) if order >= 2 else None
        for (i, j), field in self._entries.items():
            result = field.jet(points, order)
            values[:, i, j] = result.value
            values[:, j, i] = -result.value
            if grads is not None:
                grads[:, i, j] = result.grad
                grads[:, j, i] = -result.grad
            if hessians is not None:
                hessians[:, i, j] = result.hess
                hessians[:, j, i] = -result.hess
        return values, grads, hessians

    def matrix(self, points) -> np.ndarray:
        """Values only, shape (B, n, n)."""
        return self.jet(points, order=0)[0]

    def at(self, x) -> np.ndarray:
        """Matrix at a single point."""
        return self.matrix(np.asarray(x, dtype=float).reshape(1, -1))[0]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, {self.as_strings()})"


class BivectorField(AntisymmetricField):
    """Bivector π with π^{ij} = π(dx^i, dx^j)."""

    kind = "bivector"

    def __init__(self, box: ChartBox, entries: Mapping, name: str = "",
                 poisson_certified: bool = False):
        super().__init__(box, entries, name)
        self.poisson_certified = poisson_certified

    def negated(self) -> "BivectorField":
        field = super().negated()
        field.poisson_certified = self.poisson_certified
        return field


class TwoFormField(AntisymmetricField):
    """2-form B with B_{ij} = B(∂_i, ∂_j)."""

    kind = "2-form"

    def __init__(self, box: ChartBox, entries: Mapping, name: str = "", closed: bool = False):
        super().__init__(box, entries, name)
        self.closed = closed

    def negated(self) -> "TwoFormField":
        field = super().negated()
        field.closed = self.closed
        return field


class OneFormField:
    """1-form α with components α_i."""

    def __init__(self, box: ChartBox, components, name: str = ""):
        if len(components) != box.dimension:
            raise NormalFormError(
                f"1-form {name!r} needs {box.dimension} components, got {len(components)}"
            )
        self.box = box
        self.name = name
        self.components = [
            c if isinstance(c, ExpressionField) else ExpressionField(c, box) for c in components
        ]

    @property
    def dimension(self) -> int:
        return self.box.dimension

    def as_strings(self):
        return [str(c) for c in self.components]

    def jet(self, points, order: int = 1):
        """(values (B,n), grads (B,n,n) with grads[b,i,l] = ∂_l α_i, hessians (B,n,n,n))."""
        points = self.box.require(points)
        batch, n = points.shape
        values = np.zeros((batch, n))
        grads = np.zeros((batch, n, n)) if order >= 1 else None
        hessians = np.zeros((batch, n, n, n)) if order >= 2 else None
        for i, component in enumerate(self.components):
            result = component.jet(points, order)
            values[:, i] = result.value
            if grads is not None:
                grads[:, i] = result.grad
            if hessians is not None:
                hessians[:, i] = result.hess
        return values, grads, hessians

    def values(self, points) -> np.ndarray:
        return self.jet(points, order=0)[0]

    def differential(self, points, with_derivative: bool = False):
        """
        Exact dα through jets, (dα)_{ij} = ∂_i α_j − ∂_j α_i.

        With with_derivative, also returns ∂_l (dα)_{ij} with shape (B,n,n,n).
        """
        _, grads, hessians = self.jet(points, order=2 if with_derivative else 1)
        d_alpha = np.swapaxes(grads, 1, 2) - grads
        if not with_derivative:
            return d_alpha
        # hessians[b,j,i,l] = ∂_l ∂_i α_j
        d_derivative = np.swapaxes(hessians, 1, 2) - hessians
        return d_alpha, d_derivative

    def __repr__(self) -> str:
        return f"OneFormField({self.name!r}, {self.as_strings()})"


def one_form_differential(alpha: OneFormField, x) -> np.ndarray:
    """dα at a single point, exact."""
    return alpha.differential(np.asarray(x, dtype=float).reshape(1, -1))[0]


def sharp(pi: BivectorField, x, xi) -> np.ndarray:
    """π♯ξ at a single point: components Σ_j π^{ij}(x) ξ_j."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (pi.dimension,):
        raise NormalFormError(f"Covector must have {pi.dimension} components, got shape {xi.shape}")
    return pi.at(x) @ xi


def jacobiator_from_derivatives(values: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """
    Jacobiator from bivector values (B,n,n) and derivatives (B,n,n,n).

    J^{ijk} = Σ_l π^{il}∂_lπ^{jk} + π^{jl}∂_lπ^{ki} + π^{kl}∂_lπ^{ij}
    """
    return (np.einsum("bil,bjkl->bijk", values, grads)
            + np.einsum("bjl,bkil->bijk", values, grads)
            + np.einsum("bkl,bijl->bijk", values, grads))


def jacobiator(pi: BivectorField, x) -> np.ndarray:
    """Jacobiator tensor (n,n,n) at a single point, derivatives exact."""
    values, grads, _ = pi.jet(np.asarray(x, dtype=float).reshape(1, -1), order=1)
    return jacobiator_from_derivatives(values, grads)[0]


def jacobiator_residuals(pi: BivectorField, points) -> np.ndarray:
    """max_{ijk} |J^{ijk}| for each point of a batch."""
    values, grads, _ = pi.jet(points, order=1)
    tensor = jacobiator_from_derivatives(values, grads)
    return np.max(np.abs(tensor).reshape(tensor.shape[0], -1), axis=1, initial=0.0)


def _stencil(x: np.ndarray, h: float, box: Optional[ChartBox]) -> np.ndarray:
    n = x.shape[0]
    offsets = h * np.eye(n)
    stencil = np.concatenate([x + offsets, x - offsets])
    if box is not None and not np.all(box.contains(stencil)):
        raise OutOfDomain(
            f"Finite-difference stencil of width {h} around "
            f"{np.array2string(x, precision=6)} leaves chart {box.name!r}",
            point=x.tolist(),
        )
    return stencil


def central_derivatives(fn: MatrixFunction, x, h: float = 1e-5,
                        box: Optional[ChartBox] = None) -> np.ndarray:
    """
    Central differences of an array-valued function.

    Returns D with D[..., l] = ∂_l fn(x), using the 2n-point stencil x ± h e_l.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    values = np.asarray(fn(_stencil(x, h, box)))
    forward, backward = values[:n], values[n:]
    return np.moveaxis((forward - backward) / (2.0 * h), 0, -1)


def exterior_derivative_numeric(omega: MatrixFunction, x, h: float = 1e-5,
                                box: Optional[ChartBox] = None) -> np.ndarray:
    """
    (dω)_{ijk} = ∂_i ω_{jk} + ∂_j ω_{ki} + ∂_k ω_{ij} by central differences.

    Args:
        omega: Maps a batch of points (B, n) to 2-form matrices (B, n, n).
        x: Base point.
        h: Stencil width.
        box: If given, the stencil must stay inside it.

    Raises:
        OutOfDomain: If the stencil leaves the box.
    """
    derivatives = central_derivatives(omega, x, h, box)   # [j, k, i] = ∂_i ω_jk
    partial = np.moveaxis(derivatives, -1, 0)               # [i, j, k]
    return partial + np.transpose(partial, (1, 2, 0)) + np.transpose(partial, (2, 0, 1))


def jacobiator_numeric(matrix_fn: MatrixFunction, x, h: float = 1e-5,
                       box: Optional[ChartBox] = None) -> np.ndarray:
    """Jacobiator of a numerically evaluated bivector field, derivatives by central differences."""
    x = np.asarray(x, dtype=float)
    value = np.asarray(matrix_fn(x[np.newaxis, :]))[0]
    grads = central_derivatives(matrix_fn, x, h, box)
    return jacobiator_from_derivatives(value[np.newaxis], grads[np.newaxis])[0]


def antisymmetrize(matrix: np.ndarray, what: str = "matrix", tol: float = ANTISYMMETRY_TOL) -> np.ndarray:
    """Check |M + Mᵀ| relative to |M| and return the antisymmetric part."""
    matrix = np.asarray(matrix, dtype=float)
    scale = np.maximum(1.0, np.max(np.abs(matrix), axis=(-2, -1), initial=0.0))
    residual = np.max(np.abs(matrix + np.swapaxes(matrix, -1, -2)), axis=(-2, -1), initial=0.0)
    if np.any(residual > tol * scale):
        raise NormalFormError(
            f"{what} is not antisymmetric (residual {float(np.max(residual)):.3e})"
        )
    return 0.5 * (matrix - np.swapaxes(matrix, -1, -2))


def gauge_matrices(pi: np.ndarray, b: np.ndarray, points: Optional[np.ndarray] = None) -> np.ndarray:
    """
    π^B = π (I + B π)^{-1} for stacks of matrices.

    Raises:
        SingularGauge: If some I + B·π has condition number above the cap.
    """
    pi = np.asarray(pi, dtype=float)
    b = np.asarray(b, dtype=float)
    n = pi.shape[-1]
    m = np.eye(n) + b @ pi
    with np.errstate(all="ignore"):
        condition = np.linalg.cond(m)
    bad = ~np.isfinite(condition) | (condition > GAUGE_CONDITION_CAP)
    if np.any(bad):
        index = int(np.argmax(np.atleast_1d(bad)))
        point = None if points is None else np.atleast_2d(points)[index].tolist()
        raise SingularGauge(
            f"I + B·π is singular (condition {float(np.atleast_1d(condition)[index]):.3e})"
            + ("" if point is None else f" at {point}"),
            point=point,
        )
    # π M^{-1} = (M^{-T} π^T)^T
    result = np.swapaxes(np.linalg.solve(np.swapaxes(m, -1, -2), np.swapaxes(pi, -1, -2)), -1, -2)
    return antisymmetrize(result, "gauge transform")


def gauge_bivector(pi: BivectorField, b: TwoFormField, x) -> np.ndarray:
    """Gauge transform π^B at a single point."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return gauge_matrices(pi.matrix(x), b.matrix(x), x)[0]


def certify_poisson(pi: BivectorField, points, tol: float = 1e-9) -> float:
    """Maximum Jacobiator residual over the points; flags the field certified when within tol."""
    residual = float(np.max(jacobiator_residuals(pi, points), initial=0.0))
    pi.poisson_certified = residual <= tol
    logger.debug(f"Jacobiator residual of {pi.name!r}: {residual:.3e} (tol {tol:.1e})")
    return residual


def certify_closed(b: TwoFormField, points, h: float = 1e-5, tol: float = 1e-6) -> float:
    """Maximum numeric |dB| over the points; flags the form closed when within tol."""
    points = as_points(points, b.dimension)
    residual = 0.0
    for x in points:
        d_b = exterior_derivative_numeric(b.matrix, x, h, b.box)
        residual = max(residual, float(np.max(np.abs(d_b), initial=0.0)))
    b.closed = residual <= tol
    return residual
