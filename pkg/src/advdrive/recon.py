"""Posed-image capture and photometric fitting of a surrogate voxel field."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .field import Aabb, RigidTransform, VoxelField, inverse_softplus
from .render import Camera, QuadConfig, generate_rays, read_ppm, render_frame, write_ppm
from .rig import CameraRig, look_rotation
from .scenes import DeploymentScene

PSNR_SENTINEL = 99.0


@dataclass
class PosedImageSet:
    cameras: List[Camera]
    images: List[np.ndarray]

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("one image per camera")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise ValueError(f"images differ in resolution: {shapes}")
        for cam, im in zip(self.cameras, self.images):
            if im.shape[:2] != (cam.height, cam.width):
                raise ValueError("image size does not match its camera")

    def __len__(self):
        return len(self.cameras)

    @property
    def shared_intrinsics(self) -> bool:
        keys = {(c.focal, c.width, c.height) for c in self.cameras}
        return len(keys) <= 1


@dataclass(frozen=True)
class CaptureSpec:
    orbit_fraction: float = 0.35
    lateral_std: float = 0.3
    heading_std: float = 0.3
    height_std: float = 0.05
    orbit_distance: Tuple[float, float] = (0.8, 2.2)
    orbit_height: Tuple[float, float] = (0.3, 0.55)
    wall_clearance: float = 0.3
    seed: int = 0


def _look_at(eye, target) -> np.ndarray:
    return look_rotation(np.asarray(target, float) - np.asarray(eye, float))


def capture_cameras(scene: DeploymentScene, n: int, spec: CaptureSpec = CaptureSpec(),
                    rig: CameraRig = CameraRig()) -> List[Camera]:
    """Driving viewpoints along the path plus jittered orbit views.

    The first camera is the undisturbed driving view at the path start.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed)
    path = scene.path
    b = scene.field.bounds
    lo = b.min[:2] + spec.wall_clearance
    hi = b.max[:2] - spec.wall_clearance
    zlo, zhi = b.min[2] + 0.05, b.max[2] - 0.02
    n_orbit = int(round(spec.orbit_fraction * n)) if n > 1 else 0
    n_drive = n - n_orbit
    cams = []
    for i in range(n_drive):
        arc = path.length * i / n_drive
        p = path.point_at(arc)
        tan = path.tangent_at(arc)
        head = math.atan2(tan[1], tan[0])
        if i > 0:
            normal = np.array([-tan[1], tan[0]])
            p = p + rng.normal(0.0, spec.lateral_std) * normal
            head += rng.normal(0.0, spec.heading_std)
        p = np.clip(p, lo, hi)
        dz = rng.normal(0.0, spec.height_std) if i > 0 else 0.0
        r = CameraRig(float(np.clip(rig.height + dz, zlo, zhi)), rig.pitch, rig.forward_offset, rig.focal,
                      rig.width, rig.height_px, rig.near, rig.far)
        cams.append(r.camera((p[0], p[1], head)))
    for _ in range(n_orbit):
        target = path.point_at(rng.uniform(0.0, path.length))
        az = rng.uniform(-math.pi, math.pi)
        dist = rng.uniform(*spec.orbit_distance)
        eye = np.array([target[0] + dist * math.cos(az), target[1] + dist * math.sin(az),
                        rng.uniform(*spec.orbit_height)])
        eye[:2] = np.clip(eye[:2], lo, hi)
        eye[2] = np.clip(eye[2], zlo, zhi)
        rot = _look_at(eye, [target[0], target[1], 0.0])
        cams.append(Camera(RigidTransform(rot, eye), rig.focal, rig.width, rig.height_px, rig.near, rig.far))
    return cams


def capture_posed_images(scene: DeploymentScene, n: int, spec: CaptureSpec = CaptureSpec(),
                         rig: CameraRig = CameraRig(), quad: QuadConfig = QuadConfig()) -> PosedImageSet:
    cams = capture_cameras(scene, n, spec, rig)
    return PosedImageSet(cams, [render_frame(scene.field, [], c, quad).color for c in cams])


def in_frustum(cam: Camera, points) -> np.ndarray:
    u, v, z = cam.project(points)
    return (z > cam.near) & (z < cam.far) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def save_posed_images(directory, images: PosedImageSet) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (cam, im) in enumerate(zip(images.cameras, images.images)):
        name = f"view{i:04d}.ppm"
        write_ppm(d / name, im)
        m = np.hstack([cam.pose.rotation, cam.pose.translation[:, None]])
        vals = " ".join(repr(float(v)) for v in m.ravel())
        lines.append(f"{name} {vals} {cam.focal!r} {cam.width} {cam.height} {cam.near!r} {cam.far!r}")
    (d / "poses.txt").write_text("\n".join(lines) + "\n")


def load_posed_images(directory) -> PosedImageSet:
    d = Path(directory)
    cams, ims = [], []
    for ln, line in enumerate((d / "poses.txt").read_text().splitlines(), 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) not in (16, 18):
            raise ValueError(f"poses.txt:{ln}: expected 16 or 18 fields, got {len(tok)}")
        m = np.array([float(t) for t in tok[1:13]]).reshape(3, 4)
        near, far = (float(tok[16]), float(tok[17])) if len(tok) == 18 else (0.05, 6.0)
        # Re-orthonormalize: the text round trip is exact for repr floats but
        # hand-edited files may drift.
        u, _, vt = np.linalg.svd(m[:, :3])
        cams.append(Camera(RigidTransform(u @ vt, m[:, 3]), float(tok[13]), int(tok[14]), int(tok[15]), near, far))
        ims.append(read_ppm(d / tok[0]))
    return PosedImageSet(cams, ims)


# --- fitting --------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_rays: int = 1024
    resolution: Tuple[int, int, int] = (64, 64, 8)
    n_samples: int = 48
    init_density: float = 0.1
    background: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_rays < 1 or self.n_samples < 1 or not self.lr > 0:
            raise ValueError("fit settings must be positive")
        if min(self.resolution) < 2:
            raise ValueError("fit resolution must be >= 2 per axis")
        if not self.init_density > 0:
            raise ValueError("init_density must be positive")


@dataclass
class FitResult:
    field: VoxelField
    loss_history: List[float]   # mean minibatch loss per epoch


def _ray_bundle(images: PosedImageSet, bounds: Aabb):
    o, d, t0, t1, rgb = [], [], [], [], []
    for cam, im in zip(images.cameras, images.images):
        rays = generate_rays(cam)
        a, b = bounds.intersect(rays.origins, rays.directions)
        o.append(rays.origins)
        d.append(rays.directions)
        t0.append(np.maximum(a, cam.near))
        t1.append(np.minimum(b, cam.far))
        rgb.append(im.reshape(-1, 3))
    t0, t1 = np.concatenate(t0), np.concatenate(t1)
    # Rays that miss the box still see the background; an empty interval
    # keeps them in the loss with zero parameter gradient.
    t1 = np.where(t1 > t0, t1, t0)
    return np.concatenate(o), np.concatenate(d), t0, t1, np.concatenate(rgb)


def fit_field(images: PosedImageSet, bounds: Aabb, cfg: FitConfig = FitConfig()) -> FitResult:
    """Adam on density and color parameters against the photometric MSE."""
    if len(images) == 0:
        raise ValueError("empty image set")
    nx, ny, nz = cfg.resolution
    params = np.zeros((nz, ny, nx, 4))
    params[..., 0] = inverse_softplus(cfg.init_density)
    o, d, t0, t1, rgb = _ray_bundle(images, bounds)
    lo, size = bounds.min.copy(), bounds.size.copy()
    res = np.asarray(cfg.resolution, dtype=np.int64)
    bg = np.asarray(cfg.background, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    m1, m2 = np.zeros_like(params), np.zeros_like(params)
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    grad = np.zeros_like(params)
    n = o.shape[0]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_rays):
            idx = np.sort(perm[s:s + cfg.batch_rays])
            grad[:] = 0.0
            loss = _kernels.photometric_grad(params, lo, size, res, o[idx], d[idx], t0[idx], t1[idx],
                                             cfg.n_samples, rgb[idx], bg, grad)
            losses.append(loss)
            step += 1
            m1 = b1 * m1 + (1 - b1) * grad
            m2 = b2 * m2 + (1 - b2) * grad * grad
            params -= cfg.lr * (m1 / (1 - b1 ** step)) / (np.sqrt(m2 / (1 - b2 ** step)) + eps)
        history.append(float(np.mean(losses)))
    field = VoxelField(cfg.resolution, params[..., 0].copy(), params[..., 1:].copy(), bounds)
    return FitResult(field, history)


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * math.log10(1.0 / mse), PSNR_SENTINEL)


def heldout_psnr(field: VoxelField, images: PosedImageSet, quad: QuadConfig = QuadConfig()) -> float:
    """PSNR over all pixels of a held-out set, pooled before the log."""
    err, count = 0.0, 0
    for cam, im in zip(images.cameras, images.images):
        r = render_frame(field, [], cam, quad).color
        err += float(np.sum((r - im) ** 2))
        count += im.size
    mse = err / count
    return PSNR_SENTINEL if mse == 0.0 else min(10.0 * math.log10(1.0 / mse), PSNR_SENTINEL)
