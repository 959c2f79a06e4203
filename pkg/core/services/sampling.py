"""
Deterministic sample plans.

All randomized checks draw from numpy's Philox counter-based generator keyed
by the run seed, so the same seed gives the same samples on every platform.
"""
import logging
from typing import Optional

import numpy as np

from core.services.expressions import ChartBox

logger = logging.getLogger(__name__)


class SampleGenerator:
    """Seeded sampler for chart points, covectors and test matrices."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.Generator(np.random.Philox(key=self.seed))

    def uniform(self, low, high, size) -> np.ndarray:
        return self._rng.uniform(low, high, size)

    def normal(self, size) -> np.ndarray:
        return self._rng.standard_normal(size)

    def in_box(self, box: ChartBox, count: int, shrink: float = 1.0) -> np.ndarray:
        """Uniform points in the box, optionally shrunk about its center."""
        center = box.center
        half = 0.5 * (box.upper - box.lower) * shrink
        return center + self._rng.uniform(-1.0, 1.0, (count, box.dimension)) * half

    def in_ball(self, center, radius: float, count: int) -> np.ndarray:
        """Uniform points in the Euclidean ball around center."""
        center = np.asarray(center, dtype=float)
        dimension = center.shape[0]
        directions = self._rng.standard_normal((count, dimension))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = radius * self._rng.uniform(0.0, 1.0, count) ** (1.0 / dimension)
        return center + directions * radii[:, None]

    def in_ball_within(self, box: ChartBox, radius: float, count: int,
                       center: Optional[np.ndarray] = None) -> np.ndarray:
        """Ball samples (around the box center by default) rejected until inside the box."""
        center = box.center if center is None else np.asarray(center, dtype=float)
        accepted = np.empty((0, box.dimension))
        while accepted.shape[0] < count:
            draw = self.in_ball(center, radius, count)
            accepted = np.vstack([accepted, draw[box.contains(draw)]])
        return accepted[:count]

    def antisymmetric(self, dimension: int, count: int, scale: float = 1.0) -> np.ndarray:
        """Random antisymmetric matrices with entries of the given scale."""
        raw = self._rng.standard_normal((count, dimension, dimension)) * scale
        return 0.5 * (raw - np.swapaxes(raw, 1, 2))

    def symmetric(self, dimension: int, count: int, scale: float = 1.0) -> np.ndarray:
        raw = self._rng.standard_normal((count, dimension, dimension)) * scale
        return 0.5 * (raw + np.swapaxes(raw, 1, 2))

    def invertible(self, dimension: int, count: int, spread: float = 0.3) -> np.ndarray:
        """Matrices I + spread·R with R standard normal, well conditioned for small spread."""
        return np.eye(dimension) + spread * self._rng.standard_normal((count, dimension, dimension))
