"""Problem descriptions: fractional order, nonlinearity, objective, bounds."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assembly import NonlinearityPreset

PointFunction = Callable[[np.ndarray], np.ndarray]


def zero_function(x: np.ndarray) -> np.ndarray:
    return np.zeros(len(x))


@dataclass(frozen=True)
class TrackingObjective:
    """L(x, u) = (u - u_d(x))^2 / 2."""

    target: PointFunction = zero_function
    singular: bool = False  # target has boundary Hoelder behaviour

    def value(self, x, u):
        return 0.5 * (u - self.target(x)) ** 2

    def du(self, x, u):
        return u - self.target(x)


@dataclass(frozen=True)
class ProblemSpec:
    """Fractional semilinear state equation with an optional control problem.

    The state solves (-Delta)^s u + a(u) = z + source in Omega, u = 0 outside.
    """

    s: float
    nonlinearity: NonlinearityPreset = field(default_factory=NonlinearityPreset)
    objective: TrackingObjective = field(default_factory=TrackingObjective)
    alpha: Optional[float] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    source: Optional[PointFunction] = None
    source_singular: bool = False

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError("fractional order s must lie in (0, 1)")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("regularization alpha must be positive")
        if self.lower is not None and self.upper is not None and not self.lower < self.upper:
            raise ValueError("control bounds must satisfy lower < upper")

    @property
    def is_control(self) -> bool:
        return self.alpha is not None and self.lower is not None and self.upper is not None
