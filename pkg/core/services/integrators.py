"""
Fixed-step classical Runge–Kutta integration with forward sensitivities,
and Gauss–Legendre quadrature on [0, 1].

Integrators act on a batch of states at once. Every member of the batch may
have its own time span; the step size of a member is its span divided by the
common step count. The flow Jacobian is carried through the same four stages
as the state (one perturbation channel per coordinate direction), so it is
the exact derivative of the discrete flow map.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class FieldEvaluation:
    """
    Values of a vector field on a batch of states.

    Attributes:
        values: Field values, shape (B, d).
        jacobians: Field Jacobians, shape (B, d, d), or None when not requested.
        defined: Mask of members where the field could be evaluated.
        singular: Mask of members that failed because a gauge transform was singular.
    """
    values: np.ndarray
    jacobians: Optional[np.ndarray]
    defined: np.ndarray
    singular: Optional[np.ndarray] = None


# (times (B,), states (B, d), with_jacobian) -> FieldEvaluation
VectorField = Callable[[np.ndarray, np.ndarray, bool], FieldEvaluation]


@dataclass
class FlowBatch:
    """
    End states of a batch of trajectories.

    Members that left the domain are frozen at their last valid state; their
    escape time and location are recorded and alive is False.
    """
    states: np.ndarray
    jacobians: Optional[np.ndarray]
    alive: np.ndarray
    escape_times: np.ndarray
    escape_locations: np.ndarray
    singular: np.ndarray
    steps: int

    @property
    def all_alive(self) -> bool:
        return bool(np.all(self.alive))


def guarded(evaluate: Callable[[np.ndarray, np.ndarray, bool], Tuple[np.ndarray, Optional[np.ndarray]]],
            inside: Callable[[np.ndarray], np.ndarray]) -> VectorField:
    """
    Wrap a field that is only defined inside a domain.

    The wrapped evaluate(times, states, with_jacobian) only ever sees the
    members for which inside(states) holds; the others get zero values.
    """
    def field(times: np.ndarray, states: np.ndarray, with_jacobian: bool) -> FieldEvaluation:
        batch, d = states.shape
        defined = inside(states)
        values = np.zeros((batch, d))
        jacobians = np.zeros((batch, d, d)) if with_jacobian else None
        if np.any(defined):
            v, j = evaluate(times[defined], states[defined], with_jacobian)
            values[defined] = v
            if with_jacobian:
                jacobians[defined] = j
        return FieldEvaluation(values, jacobians, defined)
    return field


def integrate(field: VectorField, states, t0, t1, steps: int,
              with_jacobian: bool = True,
              inside: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> FlowBatch:
    """
    Integrate a batch of states with the classical fourth-order Runge–Kutta scheme.

    Args:
        field: Vector field callback.
        states: Initial states, shape (B, d).
        t0: Start times, scalar or shape (B,).
        t1: End times, scalar or shape (B,).
        steps: Number of fixed steps for every member.
        with_jacobian: Also propagate the flow Jacobian.
        inside: Optional domain test for end-of-step states.

    Returns:
        FlowBatch with end states, Jacobians and escape bookkeeping.
    """
    states = np.array(states, dtype=float, ndmin=2)
    batch, d = states.shape
    if steps < 1:
        raise ValueError(f"steps must be positive, got {steps}")
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (batch,)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (batch,)).copy()
    h = (t1 - t0) / steps

    y = states.copy()
    jac = np.broadcast_to(np.eye(d), (batch, d, d)).copy() if with_jacobian else None
    alive = np.ones(batch, dtype=bool)
    singular = np.zeros(batch, dtype=bool)
    escape_times = np.full(batch, np.nan)
    escape_locations = np.full((batch, d), np.nan)

    if inside is not None:
        outside = ~inside(y)
        alive &= ~outside
        escape_times[outside] = t0[outside]
        escape_locations[outside] = y[outside]

    for step in range(steps):
        index = np.flatnonzero(alive)
        if index.size == 0:
            break
        yi, hi = y[index], h[index]
        ti = t0[index] + step * hi
        ji = jac[index] if with_jacobian else None

        failed = np.zeros(index.size, dtype=bool)
        failed_singular = np.zeros(index.size, dtype=bool)
        slopes, tangent_slopes = [], []
        stage_state, stage_jac = yi, ji
        for c, weight in ((0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, None)):
            evaluation = field(ti + c * hi, stage_state, with_jacobian)
            failed |= ~evaluation.defined
            if evaluation.singular is not None:
                failed_singular |= evaluation.singular
            k = evaluation.values
            slopes.append(k)
            if with_jacobian:
                tangent_slopes.append(evaluation.jacobians @ stage_jac)
            if weight is not None:
                stage_state = yi + (weight * hi)[:, None] * k
                if with_jacobian:
                    stage_jac = ji + (weight * hi)[:, None, None] * tangent_slopes[-1]

        k1, k2, k3, k4 = slopes
        y_next = yi + (hi / 6.0)[:, None] * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if inside is not None:
            failed |= ~inside(y_next)

        ok = ~failed
        y[index[ok]] = y_next[ok]
        if with_jacobian:
            t1_, t2_, t3_, t4_ = tangent_slopes
            jac_next = ji + (hi / 6.0)[:, None, None] * (t1_ + 2.0 * t2_ + 2.0 * t3_ + t4_)
            jac[index[ok]] = jac_next[ok]

        dead = index[failed]
        if dead.size:
            alive[dead] = False
            singular[dead] = failed_singular[failed]
            escape_times[dead] = ti[failed]
            escape_locations[dead] = yi[failed]
            logger.debug(f"{dead.size} trajectories stopped at step {step}")

    return FlowBatch(y, jac, alive, escape_times, escape_locations, singular, steps)


@lru_cache(maxsize=32)
def _legendre(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_legendre(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the K-point Gauss–Legendre rule on [0, 1]."""
    if nodes < 1:
        raise ValueError(f"quadrature needs at least one node, got {nodes}")
    x, w = _legendre(int(nodes))
    return x.copy(), w.copy()
