"""Vehicle-mounted camera rig."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import RigidTransform
from .render import Camera


def look_rotation(forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with columns (right, down, forward)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        right = np.array([1.0, 0.0, 0.0]) if abs(f[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = right - f * (right @ f)
        n = np.linalg.norm(right)
    right = right / n
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


@dataclass(frozen=True)
class CameraRig:
    """Forward camera at fixed height and downward pitch (radians)."""

    height: float = 0.25
    pitch: float = 0.35
    forward_offset: float = 0.0
    focal: float = 16.0
    width: int = 32
    height_px: int = 32
    near: float = 0.05
    far: float = 6.0

    def camera(self, state) -> Camera:
        # Pose is computed from plain floats: no gradient flows through it.
        x, y, th = float(state[0]), float(state[1]), float(state[2])
        c, s = math.cos(th), math.sin(th)
        fwd = np.array([c * math.cos(self.pitch), s * math.cos(self.pitch), -math.sin(self.pitch)])
        pos = np.array([x + self.forward_offset * c, y + self.forward_offset * s, self.height])
        return Camera(RigidTransform(look_rotation(fwd), pos), self.focal, self.width, self.height_px,
                      self.near, self.far)
