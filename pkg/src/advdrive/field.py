"""Dense voxel radiance fields.

Grids store pre-activation parameters. Density is activated with softplus and
color with sigmoid after trilinear interpolation, so raw parameters stay
unconstrained while activated values are always valid.

Storage order is x-fastest row-major: arrays have shape ``(nz, ny, nx)`` for
density and ``(nz, ny, nx, 3)`` for color.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Tuple

import numpy as np

MAGIC = b"VXFD"
VERSION = 1
_HEADER = struct.Struct("<4sI3I6f8s8s")


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box in meters."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValueError(f"Aabb requires min < max componentwise, got {lo} / {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)

    def intersect(self, origins, directions):
        """Slab test for a batch of rays.

        Returns entry and exit parameters ``(t0, t1)``; rays that miss have
        ``t0 > t1``.
        """
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(directions, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (self.min - o) * inv
            tb = (self.max - o) * inv
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        # An axis-parallel ray inside the slab yields nan from 0 * inf.
        inside = (o >= self.min) & (o <= self.max)
        lo = np.where(np.isnan(lo), np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(np.isnan(hi), np.where(inside, np.inf, -np.inf), hi)
        return lo.max(axis=-1), hi.min(axis=-1)


@dataclass
class VoxelField:
    resolution: Tuple[int, int, int]
    density_params: np.ndarray
    color_params: np.ndarray
    bounds: Aabb

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if len(res) != 3 or min(res) < 1:
            raise ValueError(f"resolution must be 3 positive integers, got {self.resolution}")
        nx, ny, nz = res
        self.resolution = res
        self.density_params = np.asarray(self.density_params, dtype=np.float64).reshape(nz, ny, nx)
        self.color_params = np.asarray(self.color_params, dtype=np.float64).reshape(nz, ny, nx, 3)

    @classmethod
    def constant(cls, resolution, bounds: Aabb, density: float = 0.0, color=(0.0, 0.0, 0.0)):
        nx, ny, nz = resolution
        return cls(
            resolution,
            np.full((nz, ny, nx), float(density)),
            np.broadcast_to(np.asarray(color, dtype=np.float64), (nz, ny, nx, 3)).copy(),
            bounds,
        )

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    def packed(self) -> np.ndarray:
        """Contiguous ``(nz, ny, nx, 4)`` raw grid (density, rgb).

        Cached against the identity of the parameter arrays; replace arrays
        rather than editing them in place.
        """
        src = getattr(self, "_packed_src", None)
        if src is None or src[0] is not self.density_params or src[1] is not self.color_params:
            self._packed = np.ascontiguousarray(
                np.concatenate([self.density_params[..., None], self.color_params], axis=-1))
            self._packed_src = (self.density_params, self.color_params)
        return self._packed

    def copy(self) -> "VoxelField":
        return VoxelField(self.resolution, self.density_params.copy(), self.color_params.copy(), self.bounds)

    def with_color_params(self, color_params) -> "VoxelField":
        return VoxelField(self.resolution, self.density_params, color_params, self.bounds)

    def lattice_points(self) -> np.ndarray:
        """World positions of every lattice node, shape ``(nz, ny, nx, 3)``."""
        axes = [
            np.linspace(self.bounds.min[k], self.bounds.max[k], self.resolution[k]) if self.resolution[k] > 1
            else np.array([self.bounds.center[k]])
            for k in range(3)
        ]
        z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([x, y, z], axis=-1)


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform mapping object-frame points to the world frame."""

    rotation: np.ndarray = dc_field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0.0):
            raise ValueError("rotation must be orthonormal")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def from_pose(cls, pose) -> "RigidTransform":
        """Build from ``(tx, ty, tz, roll, pitch, yaw, log_scale)``."""
        tx, ty, tz, roll, pitch, yaw, log_scale = (float(v) for v in pose)
        return cls(euler_rotation(roll, pitch, yaw), np.array([tx, ty, tz]), float(np.exp(log_scale)))

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def inverse_apply(self, points) -> np.ndarray:
        return ((np.asarray(points) - self.translation) @ self.rotation) / self.scale


def euler_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def world_to_grid(field: VoxelField, points) -> np.ndarray:
    """Affine map of ``field.bounds`` onto ``[0, resolution - 1]`` per axis."""
    p = np.asarray(points, dtype=np.float64)
    res = np.asarray(field.resolution, dtype=np.float64)
    return (p - field.bounds.min) / field.bounds.size * (res - 1.0)


@dataclass
class SampleCache:
    """Corner indices and trilinear weights of a batch of samples."""

    index: np.ndarray     # (M, 8) flat voxel index
    weight: np.ndarray    # (M, 8)
    inside: np.ndarray    # (M,) bool
    color: np.ndarray     # (M, 3) activated color
    raw_density: np.ndarray  # (M,) interpolated pre-activation density


def corner_weights(field: VoxelField, points):
    """Flat indices and weights of the 8 lattice nodes around each point.

    Points outside the bounds get weight zero on every corner.
    """
    g = world_to_grid(field, points).reshape(-1, 3)
    res = np.asarray(field.resolution)
    inside = np.all((g >= 0.0) & (g <= res - 1), axis=-1)
    base = np.clip(np.floor(g), 0, np.maximum(res - 2, 0)).astype(np.int64)
    frac = np.where(res > 1, g - base, 0.0)
    upper = np.minimum(base + 1, res - 1)
    nx, ny = res[0], res[1]
    idx = np.empty((g.shape[0], 8), dtype=np.int64)
    w = np.empty((g.shape[0], 8))
    k = 0
    for dz in (0, 1):
        iz = upper[:, 2] if dz else base[:, 2]
        wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
        for dy in (0, 1):
            iy = upper[:, 1] if dy else base[:, 1]
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dx in (0, 1):
                ix = upper[:, 0] if dx else base[:, 0]
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                idx[:, k] = ix + nx * (iy + ny * iz)
                w[:, k] = wx * wy * wz
                k += 1
    w *= inside[:, None]
    return idx, w, inside


def sample_field(field: VoxelField, points, with_cache: bool = False):
    """Batched trilinear sampling followed by activation.

    Returns ``(density, color)`` with shapes ``points.shape[:-1]`` and
    ``points.shape[:-1] + (3,)``; with ``with_cache`` also a SampleCache.
    """
    p = np.asarray(points, dtype=np.float64)
    lead = p.shape[:-1]
    idx, w, inside = corner_weights(field, p)
    raw_d = np.einsum("mk,mk->m", field.density_params.reshape(-1)[idx], w)
    raw_c = np.einsum("mkc,mk->mc", field.color_params.reshape(-1, 3)[idx], w)
    density = np.where(inside, softplus(raw_d), 0.0)
    color = sigmoid(raw_c) * inside[:, None]
    out = density.reshape(lead), color.reshape(lead + (3,))
    if with_cache:
        return out + (SampleCache(idx, w, inside, color, raw_d),)
    return out


def trilinear_sample(field: VoxelField, point):
    """Density and color at a single world point (vacuum outside bounds)."""
    density, color = sample_field(field, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return float(density[0]), color[0]


def transform_ray(xf: RigidTransform, origin, direction):
    """Express a world ray in the object frame of ``xf``.

    Returns ``(origin', direction', factor)`` where ``factor`` converts the
    object-frame ray parameter into world meters.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    o_obj = ((o - xf.translation) @ xf.rotation) / xf.scale
    d_obj = d @ xf.rotation
    return o_obj, d_obj, xf.scale


def save_field(path, field: VoxelField) -> None:
    nx, ny, nz = field.resolution
    header = _HEADER.pack(
        MAGIC, VERSION, nx, ny, nz,
        *field.bounds.min.tolist(), *field.bounds.max.tolist(),
        b"softplus", b"sigmoid\0",
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(field.density_params.astype("<f4").tobytes())
        fh.write(field.color_params.astype("<f4").tobytes())


def load_field(path) -> VoxelField:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated field header")
    magic, version, nx, ny, nz, *rest = _HEADER.unpack_from(data)
    bounds, act_d, act_c = rest[:6], rest[6], rest[7]
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if act_d.rstrip(b"\0") != b"softplus" or act_c.rstrip(b"\0") != b"sigmoid":
        raise ValueError(f"{path}: unsupported activations {act_d!r}/{act_c!r}")
    n = nx * ny * nz
    body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if body.size != 4 * n:
        raise ValueError(f"{path}: expected {4 * n} floats, found {body.size}")
    return VoxelField(
        (nx, ny, nz),
        body[:n].astype(np.float64),
        body[n:].astype(np.float64),
        Aabb(np.array(bounds[:3]), np.array(bounds[3:])),
    )


def quantize(field: VoxelField) -> VoxelField:
    """Round parameters through float32, matching a save/load round trip."""
    return VoxelField(
        field.resolution,
        field.density_params.astype(np.float32).astype(np.float64),
        field.color_params.astype(np.float32).astype(np.float64),
        Aabb(field.bounds.min.astype(np.float32).astype(np.float64),
             field.bounds.max.astype(np.float32).astype(np.float64)),
    )
