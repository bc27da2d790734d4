"""Procedural deployment scenes and attackable object assets."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Tuple

import numpy as np

from .field import Aabb, VoxelField, logit
from .paths import ReferencePath, l_turn_path, square_loop_path, straight_path

SOLID = 40.0
EMPTY = -32.0


@dataclass(frozen=True)
class DeploymentSpec:
    track: str = "l_turn"
    track_width: float = 1.2
    leg: float = 3.0
    radius: float = 1.5
    margin: float = 1.4
    resolution: Tuple[int, int, int] = (128, 128, 16)
    z_range: Tuple[float, float] = (-0.15, 0.6)
    line_width: float = 0.1
    wall_height: float = 0.45
    wall_thickness: float = 0.15
    road_color: Tuple[float, float, float] = (0.2, 0.2, 0.22)
    line_color: Tuple[float, float, float] = (0.95, 0.95, 0.9)
    grass_color: Tuple[float, float, float] = (0.35, 0.7, 0.3)
    wall_colors: Tuple[Tuple[float, float, float], ...] = ((0.85, 0.2, 0.15), (0.95, 0.95, 0.95))
    stripe: float = 0.5

    def __post_init__(self):
        if self.track not in ("straight", "l_turn", "square"):
            raise ValueError(f"unknown track shape {self.track!r}")


@dataclass
class DeploymentScene:
    field: VoxelField
    path: ReferencePath
    spec: DeploymentSpec


def make_path(spec: DeploymentSpec) -> ReferencePath:
    if spec.track == "straight":
        return straight_path(2 * spec.leg + spec.radius)
    if spec.track == "l_turn":
        return l_turn_path(spec.leg, spec.radius)
    return square_loop_path(2 * spec.leg, spec.radius)


def _distance_to_path(points2d: np.ndarray, path: ReferencePath) -> np.ndarray:
    start, vec = path.segments
    best = np.full(points2d.shape[0], np.inf)
    for a, v in zip(start, vec):
        s = np.clip(((points2d - a) @ v) / (v @ v), 0.0, 1.0)
        d = np.linalg.norm(points2d - (a + s[:, None] * v), axis=1)
        best = np.minimum(best, d)
    return best


def build_deployment_scene(spec: DeploymentSpec = DeploymentSpec()) -> DeploymentScene:
    """Rasterize ground, lane markings and perimeter walls into a voxel field."""
    path = make_path(spec)
    lo2 = path.waypoints.min(axis=0) - spec.margin
    hi2 = path.waypoints.max(axis=0) + spec.margin
    bounds = Aabb([lo2[0], lo2[1], spec.z_range[0]], [hi2[0], hi2[1], spec.z_range[1]])
    empty = VoxelField.constant(spec.resolution, bounds)
    pts = empty.lattice_points().reshape(-1, 3)
    xy, z = pts[:, :2], pts[:, 2]

    d = _distance_to_path(xy, path)
    half = spec.track_width / 2
    color = np.tile(np.asarray(spec.grass_color), (pts.shape[0], 1))
    color[d <= half] = spec.road_color
    on_line = np.abs(d - half) <= spec.line_width / 2
    color[on_line] = spec.line_color
    density = np.where(z <= 0.0, SOLID, EMPTY)

    inset = np.minimum(np.minimum(xy[:, 0] - lo2[0], hi2[0] - xy[:, 0]),
                       np.minimum(xy[:, 1] - lo2[1], hi2[1] - xy[:, 1]))
    wall = (inset <= spec.wall_thickness) & (z <= spec.wall_height)
    density = np.where(wall, SOLID, density)
    # Vertical stripes along the perimeter give the policy heading cues.
    stripe_idx = (np.floor((xy[:, 0] + xy[:, 1]) / spec.stripe).astype(int)) % len(spec.wall_colors)
    wall_rgb = np.asarray(spec.wall_colors)[stripe_idx]
    color = np.where((wall & (z > 0.0))[:, None], wall_rgb, color)

    nx, ny, nz = spec.resolution
    field = VoxelField(spec.resolution, density.reshape(nz, ny, nx),
                       logit(np.clip(color, 0.02, 0.98)).reshape(nz, ny, nx, 3), bounds)
    return DeploymentScene(field, path, spec)


def box_object(resolution: int = 8, half_extent: float = 0.4, color=(0.5, 0.5, 0.5)) -> VoxelField:
    """Solid cube in a unit object frame ``[-0.5, 0.5]^3``.

    Color parameters start at ``logit(color)``; the default grey is all zeros.
    """
    bounds = Aabb([-0.5] * 3, [0.5] * 3)
    f = VoxelField.constant((resolution,) * 3, bounds)
    pts = f.lattice_points()
    inside = np.all(np.abs(pts) <= half_extent + 1e-9, axis=-1)
    dens = np.where(inside, SOLID, EMPTY)
    raw = logit(np.clip(np.asarray(color, dtype=np.float64), 1e-6, 1 - 1e-6))
    col = np.broadcast_to(raw, pts.shape).copy()
    return VoxelField(f.resolution, dens, col, bounds)


def cylinder_object(resolution: int = 8, radius: float = 0.3, half_height: float = 0.45,
                    color=(0.5, 0.5, 0.5)) -> VoxelField:
    """Upright cylinder ("hydrant") in the unit object frame."""
    bounds = Aabb([-0.5] * 3, [0.5] * 3)
    f = VoxelField.constant((resolution,) * 3, bounds)
    pts = f.lattice_points()
    inside = (np.hypot(pts[..., 0], pts[..., 1]) <= radius + 1e-9) & (np.abs(pts[..., 2]) <= half_height + 1e-9)
    dens = np.where(inside, SOLID, EMPTY)
    raw = logit(np.clip(np.asarray(color, dtype=np.float64), 1e-6, 1 - 1e-6))
    return VoxelField(f.resolution, dens, np.broadcast_to(raw, pts.shape).copy(), bounds)


def random_distractors(path: ReferencePath, rng: np.random.Generator, max_objects: int = 3,
                       scale_range=(0.6, 1.0), lateral_range=(0.9, 1.8), prob: float = 0.7,
                       texture_prob: float = 0.0, texture_std: float = 5.0):
    """Boxes scattered beside the track for training augmentation.

    Each box is a solid color, or with ``texture_prob`` carries i.i.d.
    ``N(0, texture_std^2)`` raw color per voxel. With probability
    ``1 - prob`` the list is empty. Returns ``(field, xf)`` pairs.
    """
    from .field import RigidTransform, euler_rotation

    if rng.uniform() >= prob:
        return []
    out = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        arc = rng.uniform(0.0, path.length)
        p = path.point_at(arc)
        t = path.tangent_at(arc)
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        off = side * rng.uniform(*lateral_range)
        s = rng.uniform(*scale_range)
        pos = np.array([p[0] - off * t[1], p[1] + off * t[0], 0.4 * s])
        xf = RigidTransform(euler_rotation(0.0, 0.0, rng.uniform(-np.pi, np.pi)), pos, s)
        obj = box_object(8, color=rng.uniform(0.05, 0.95, 3))
        if rng.uniform() < texture_prob:
            obj = obj.with_color_params(rng.normal(0.0, texture_std, obj.color_params.shape))
        out.append((obj, xf))
    return out
