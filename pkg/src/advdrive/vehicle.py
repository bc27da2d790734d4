"""Fixed-speed planar vehicle models integrated with explicit Euler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Ackermann steering is kept this far inside +-pi/2.
ACKERMANN_MARGIN = 1e-3


class VehicleState(NamedTuple):
    x: float
    y: float
    heading: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class DynamicsParams:
    speed: float = 1.5
    dt: float = 0.05
    model: str = "dubins"
    wheelbase: float = 0.33

    def __post_init__(self):
        if self.model not in ("dubins", "ackermann"):
            raise ValueError(f"unknown dynamics model {self.model!r}")
        if not (self.speed > 0 and self.dt > 0 and self.wheelbase > 0):
            raise ValueError("speed, dt and wheelbase must be positive")


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; in-range values pass through unchanged."""
    if -math.pi < a <= math.pi:
        return a
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def _clamp_steering(u: float) -> float:
    lim = math.pi / 2 - ACKERMANN_MARGIN
    return min(max(u, -lim), lim)


def heading_rate(u: float, params: DynamicsParams) -> float:
    if params.model == "dubins":
        return u
    return params.speed / params.wheelbase * math.tan(_clamp_steering(u))


def dynamics_step(state: VehicleState, u: float, params: DynamicsParams) -> VehicleState:
    x, y, th = state
    v, dt = params.speed, params.dt
    return VehicleState(
        x + dt * v * math.cos(th),
        y + dt * v * math.sin(th),
        wrap_angle(th + dt * heading_rate(u, params)),
    )


def dynamics_jacobians(state: VehicleState, u: float, params: DynamicsParams):
    """Jacobians of the Euler map: ``(df/dx (3, 3), df/du (3,))``.

    Heading wrap is treated as identity.
    """
    th = state[2]
    v, dt = params.speed, params.dt
    a = np.eye(3)
    a[0, 2] = -dt * v * math.sin(th)
    a[1, 2] = dt * v * math.cos(th)
    b = np.zeros(3)
    if params.model == "dubins":
        b[2] = dt
    else:
        lim = math.pi / 2 - ACKERMANN_MARGIN
        if abs(u) < lim:
            b[2] = dt * v / params.wheelbase / math.cos(u) ** 2
    return a, b
