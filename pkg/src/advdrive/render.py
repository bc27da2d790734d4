"""Volume rendering of voxel fields and depth-ordered compositing.

Every field (scene and each inserted object) is marched independently along
each camera ray, then the per-field ``(color, alpha, depth)`` triples are
blended per pixel in increasing depth order. Only object color parameters are
differentiable; see :func:`render_vjp_color`.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .field import RigidTransform, VoxelField, corner_weights, sample_field, sigmoid, softplus, transform_ray

DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
# Pixels whose foreground opacity is below this take the background depth.
DEPTH_ALPHA_THRESHOLD = 0.01


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``pose`` maps camera coordinates (x right, y down,
    z forward) to the world."""

    pose: RigidTransform
    focal: float
    width: int
    height: int
    near: float = 0.05
    far: float = 6.0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        if abs(self.pose.scale - 1.0) > 1e-12:
            raise ValueError("camera pose must have unit scale")

    @property
    def forward(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    def project(self, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pixel coordinates ``(u, v)`` and camera depth of world points."""
        pc = (np.asarray(points, dtype=np.float64) - self.position) @ self.pose.rotation
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[..., 0] / z + 0.5 * self.width
            v = self.focal * pc[..., 1] / z + 0.5 * self.height
        return u, v, z


@dataclass
class Rays:
    origins: np.ndarray     # (N, 3)
    directions: np.ndarray  # (N, 3), unit norm

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(camera: Camera) -> Rays:
    """One ray per pixel center, row-major (row index = image y)."""
    w, h, f = camera.width, camera.height, camera.focal
    xs = (np.arange(w) + 0.5 - 0.5 * w) / f
    ys = (np.arange(h) + 0.5 - 0.5 * h) / f
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    dirs = d_cam @ camera.pose.rotation.T
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return Rays(origins, dirs)


@dataclass
class MarchCache:
    """Per-sample state kept for reverse accumulation."""

    weights: np.ndarray        # (M, n) T_i * a_i
    trans_after: np.ndarray    # (M, n) T_{i+1}
    trans_final: np.ndarray    # (M,)
    samples: object            # SampleCache over M * n points
    step: np.ndarray           # (M,) quadrature step in the field frame


@dataclass
class MarchResult:
    color: np.ndarray   # (M, 3) premultiplied radiance sum_i T_i a_i c_i
    alpha: np.ndarray   # (M,)
    depth: np.ndarray   # (M,) field-frame ray parameter, 0 where alpha == 0
    cache: Optional[MarchCache] = None

    @property
    def unpremultiplied(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.alpha[:, None] > 0, self.color / self.alpha[:, None], 0.0)


def march_field(field: VoxelField, origins, directions, n_samples: int, near, far,
                with_cache: bool = False) -> MarchResult:
    """Uniform midpoint quadrature of the emission-absorption integral.

    ``near``/``far`` may be scalars or per-ray arrays. Samples sit at
    ``t_i = near + (i + 1/2) * delta`` with ``delta = (far - near) / n``;
    ``a_i = 1 - exp(-sigma_i * delta)`` and ``T_i = prod_{j<i} (1 - a_j)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    m = o.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (m,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (m,))
    step = np.maximum(far - near, 0.0) / n_samples
    t = near[:, None] + (np.arange(n_samples) + 0.5) * step[:, None]
    points = o[:, None, :] + t[..., None] * d[:, None, :]
    if with_cache:
        sigma, color, scache = sample_field(field, points, with_cache=True)
    else:
        sigma, color = sample_field(field, points)
    tau = sigma * step[:, None]
    cum = np.cumsum(tau, axis=1)
    trans_after = np.exp(-cum)
    trans_before = np.exp(-(cum - tau))
    weights = trans_before - trans_after
    trans_final = trans_after[:, -1]
    alpha = 1.0 - trans_final
    rgb = np.einsum("mn,mnc->mc", weights, color)
    wsum = weights.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(wsum > 0, (weights * t).sum(axis=1) / wsum, 0.0)
    cache = MarchCache(weights, trans_after, trans_final, scache, step) if with_cache else None
    return MarchResult(rgb, alpha, depth, cache)


def march_field_vjp(field: VoxelField, cache: MarchCache, grad_color, grad_alpha=None,
                    wrt_density: bool = False):
    """Reverse pass of :func:`march_field` for color and alpha cotangents.

    Returns ``(grad_density_params, grad_color_params)`` shaped like the
    field arrays; the density term is ``None`` unless ``wrt_density``.
    """
    gc = np.asarray(grad_color, dtype=np.float64).reshape(-1, 3)
    m, n = cache.weights.shape
    s = cache.samples
    color = s.color.reshape(m, n, 3)
    proj = np.einsum("mnc,mc->mn", color, gc)
    # d(rgb)/d(raw color) = w_i * c_i (1 - c_i), then trilinear scatter.
    g_raw_c = (cache.weights[..., None] * gc[:, None, :] * color * (1.0 - color)).reshape(-1, 3)
    idx = s.index.reshape(-1)
    wts = s.weight.reshape(-1, 8)
    nvox = field.n_voxels
    grad_c = np.empty((nvox, 3))
    for ch in range(3):
        grad_c[:, ch] = np.bincount(idx, weights=(wts * g_raw_c[:, ch:ch + 1]).reshape(-1), minlength=nvox)
    grad_c = grad_c.reshape(field.color_params.shape)
    if not wrt_density:
        return None, grad_c
    # d(rgb . g)/d tau_k = T_{k+1} c_k . g - sum_{i>k} w_i c_i . g
    wp = cache.weights * proj
    suffix = np.cumsum(wp[:, ::-1], axis=1)[:, ::-1] - wp
    g_tau = cache.trans_after * proj - suffix
    if grad_alpha is not None:
        ga = np.asarray(grad_alpha, dtype=np.float64).reshape(-1)
        g_tau = g_tau + cache.trans_final[:, None] * ga[:, None]
    # sigma = softplus(raw) on inside samples; d softplus = sigmoid
    dsig = sigmoid(s.raw_density).reshape(m, n) * s.inside.reshape(m, n)
    g_raw_d = (g_tau * cache.step[:, None] * dsig).reshape(-1)
    grad_d = np.bincount(idx, weights=(wts * g_raw_d[:, None]).reshape(-1), minlength=nvox)
    return grad_d.reshape(field.density_params.shape), grad_c


def composite_pixel(entries: Sequence[Tuple[Sequence[float], float, float]]):
    """Blend ``(color, alpha, depth)`` entries of one pixel front to back.

    Colors are un-premultiplied. Two entries combine as
    ``c = (a_f c_f + (1 - a_f) a_b c_b) / (a_f + a_b (1 - a_f))``; more
    entries fold pairwise in increasing depth. Entries with zero alpha have an
    undefined depth and sort last.
    """
    items = [(np.asarray(c, dtype=np.float64), float(a), float(z)) for c, a, z in entries]
    if not items:
        return np.zeros(3), 0.0, 0.0
    items.sort(key=lambda e: e[2] if e[1] > 0 else np.inf)
    c_f, a_f, z_f = items[0]
    for c_b, a_b, z_b in items[1:]:
        total = a_f + a_b * (1.0 - a_f)
        if total == 0.0:
            c_f, a_f, z_f = c_b, a_b, z_b
            continue
        c_f = (a_f * c_f + (1.0 - a_f) * a_b * c_b) / total
        if a_f <= DEPTH_ALPHA_THRESHOLD and a_b > 0:
            z_f = z_b
        a_f = total
    return c_f, a_f, z_f


def composite_layers(colors, alphas, depths):
    """Vectorized front-to-back 'over' of K premultiplied layers.

    ``colors`` (K, M, 3) premultiplied, ``alphas`` and ``depths`` (K, M).
    Equivalent to repeated :func:`composite_pixel` with the result expressed
    as premultiplied color. Returns ``(color, alpha, depth, trans_before)``
    where ``trans_before[k]`` is the transmittance in front of layer k, i.e.
    d(color)/d(colors[k]).
    """
    k_layers, m = alphas.shape
    key = np.where(alphas > 0, depths, np.inf)
    order = np.argsort(key, axis=0, kind="stable")
    cols = np.arange(m)
    trans = np.ones(m)
    out_c = np.zeros((m, 3))
    out_z = np.zeros(m)
    acc_a = np.zeros(m)
    trans_before = np.empty((k_layers, m))
    for rank in range(k_layers):
        layer = order[rank]
        a = alphas[layer, cols]
        trans_before[layer, cols] = trans
        out_c += trans[:, None] * colors[layer, cols]
        take = (rank == 0) | ((acc_a <= DEPTH_ALPHA_THRESHOLD) & (a > 0))
        out_z = np.where(take, depths[layer, cols], out_z)
        acc_a = acc_a + a * (1.0 - acc_a)
        trans = trans * (1.0 - a)
    return out_c, 1.0 - trans, out_z, trans_before


@dataclass
class QuadConfig:
    scene_samples: int = 48
    object_samples: int = 24
    background: Tuple[float, float, float] = DEFAULT_BACKGROUND
    # False routes every forward march through the numpy reference path.
    compiled: bool = True


@dataclass
class ObjectTrace:
    ray_ids: np.ndarray   # rays that hit the object's box
    result: MarchResult


@dataclass
class RenderState:
    """Quadrature caches of one frame, needed by :func:`render_vjp_color`."""

    camera: Camera
    objects: List[VoxelField]
    traces: List[Optional[ObjectTrace]]
    trans_before: np.ndarray  # (K, N), layer 0 is the scene


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3)
    alpha: np.ndarray   # (H, W)
    depth: np.ndarray   # (H, W) world meters along the ray
    state: Optional[RenderState] = None


def march_compiled(fld: VoxelField, origins, dirs, n_samples, near, far) -> MarchResult:
    """:func:`march_field` via the compiled per-ray loop (no cache)."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    m = o.shape[0]
    near = np.ascontiguousarray(np.broadcast_to(np.asarray(near, dtype=np.float64), (m,)))
    far = np.ascontiguousarray(np.broadcast_to(np.asarray(far, dtype=np.float64), (m,)))
    rgb, alpha, depth = _kernels.march_rays(
        fld.packed(), fld.bounds.min, fld.bounds.size, np.asarray(fld.resolution, dtype=np.int64),
        o, d, near, far, int(n_samples))
    return MarchResult(rgb, alpha, depth)


def march_scene(scene: VoxelField, rays: Rays, camera: Camera, n_samples: int, compiled: bool = True):
    """Premultiplied color, alpha and depth of the scene field for all rays."""
    n = len(rays)
    color, alpha, depth = np.zeros((n, 3)), np.zeros(n), np.zeros(n)
    t0, t1 = scene.bounds.intersect(rays.origins, rays.directions)
    t0 = np.maximum(t0, camera.near)
    t1 = np.minimum(t1, camera.far)
    hit = np.nonzero(t1 > t0)[0]
    march = march_compiled if compiled else march_field
    res = march(scene, rays.origins[hit], rays.directions[hit], n_samples, t0[hit], t1[hit])
    color[hit], alpha[hit], depth[hit] = res.color, res.alpha, res.depth
    return color, alpha, depth


def march_object(obj: VoxelField, xf: RigidTransform, rays: Rays, camera: Camera, n_samples: int,
                 with_cache: bool = False, compiled: bool = True):
    """March an object field placed by ``xf``; depths are world meters."""
    n = len(rays)
    o_obj, d_obj, factor = transform_ray(xf, rays.origins, rays.directions)
    t0, t1 = obj.bounds.intersect(o_obj, d_obj)
    t0 = np.maximum(t0, camera.near / factor)
    t1 = np.minimum(t1, camera.far / factor)
    hit = np.nonzero(t1 > t0)[0]
    if with_cache or not compiled:
        res = march_field(obj, o_obj[hit], d_obj[hit], n_samples, t0[hit], t1[hit], with_cache=with_cache)
    else:
        res = march_compiled(obj, o_obj[hit], d_obj[hit], n_samples, t0[hit], t1[hit])
    color, alpha, depth = np.zeros((n, 3)), np.zeros(n), np.zeros(n)
    color[hit], alpha[hit], depth[hit] = res.color, res.alpha, res.depth * factor
    return color, alpha, depth, ObjectTrace(hit, res)


def render_frame(scene: Optional[VoxelField], objects: Sequence[Tuple[VoxelField, RigidTransform]],
                 camera: Camera, quad: QuadConfig = QuadConfig(), retain: bool = False) -> RenderOutput:
    """Render the scene with inserted objects from ``camera``."""
    rays = generate_rays(camera)
    n = len(rays)
    layers_c, layers_a, layers_z = [], [], []
    if scene is not None:
        c, a, z = march_scene(scene, rays, camera, quad.scene_samples, quad.compiled)
    else:
        c, a, z = np.zeros((n, 3)), np.zeros(n), np.zeros(n)
    layers_c.append(c), layers_a.append(a), layers_z.append(z)
    traces = []
    for obj, xf in objects:
        c, a, z, trace = march_object(obj, xf, rays, camera, quad.object_samples, with_cache=retain,
                                       compiled=quad.compiled)
        layers_c.append(c), layers_a.append(a), layers_z.append(z)
        traces.append(trace if retain else None)
    color, alpha, depth, trans_before = composite_layers(np.stack(layers_c), np.stack(layers_a), np.stack(layers_z))
    color = color + (1.0 - alpha)[:, None] * np.asarray(quad.background, dtype=np.float64)
    h, w = camera.height, camera.width
    state = RenderState(camera, [o for o, _ in objects], traces, trans_before) if retain else None
    return RenderOutput(color.reshape(h, w, 3), alpha.reshape(h, w), depth.reshape(h, w), state)


def render_vjp_color(state: Optional[RenderState], seed) -> List[np.ndarray]:
    """Gradient of ``sum(seed * image)`` w.r.t. each object's color params.

    Density, pose and scene parameters are treated as constants.
    """
    if state is None or any(t is None for t in state.traces):
        raise ValueError("render_vjp_color needs a frame rendered with retain=True")
    g = np.asarray(seed, dtype=np.float64).reshape(-1, 3)
    grads = []
    for k, (obj, trace) in enumerate(zip(state.objects, state.traces)):
        if trace.ray_ids.size == 0 or trace.result.cache.weights.size == 0:
            grads.append(np.zeros_like(obj.color_params))
            continue
        ids = trace.ray_ids
        g_obj = g[ids] * state.trans_before[k + 1, ids][:, None]
        _, gc = march_field_vjp(obj, trace.result.cache, g_obj)
        grads.append(gc)
    return grads


def opaque_depth_composite(color, depth, object_layers, alpha_threshold: float = 0.5):
    """Insert objects into a frame that has only color and depth.

    ``object_layers`` is a sequence of ``(color, alpha, depth)`` images from
    volumetric object renders; each object is treated as opaque wherever its
    alpha reaches ``alpha_threshold``, and the nearer surface wins outright.
    """
    out = np.array(color, dtype=np.float64, copy=True)
    best = np.array(depth, dtype=np.float64, copy=True)
    for c_o, a_o, z_o in object_layers:
        a_o = np.asarray(a_o)
        with np.errstate(divide="ignore", invalid="ignore"):
            surf = np.where(a_o[..., None] > 0, np.asarray(c_o) / a_o[..., None], 0.0)
        win = (a_o >= alpha_threshold) & (np.asarray(z_o) < best)
        out[win] = surf[win]
        best = np.where(win, z_o, best)
    return out, best


def render_opaque_frame(scene: VoxelField, objects: Sequence[Tuple[VoxelField, RigidTransform]],
                        camera: Camera, quad: QuadConfig = QuadConfig()) -> RenderOutput:
    """Deployment-style render: scene color/depth plus opaque object insertion."""
    rays = generate_rays(camera)
    h, w = camera.height, camera.width
    c, a, z = march_scene(scene, rays, camera, quad.scene_samples, quad.compiled)
    bg = np.asarray(quad.background, dtype=np.float64)
    color = c + (1.0 - a)[:, None] * bg
    depth = np.where(a > DEPTH_ALPHA_THRESHOLD, z, np.inf)
    layers = []
    for obj, xf in objects:
        oc, oa, oz, _ = march_object(obj, xf, rays, camera, quad.object_samples, compiled=quad.compiled)
        layers.append((oc, oa, oz))
    color, depth = opaque_depth_composite(color, depth, layers)
    return RenderOutput(color.reshape(h, w, 3), a.reshape(h, w), depth.reshape(h, w))


# --- image files -----------------------------------------------------------

def write_ppm(path, image) -> None:
    """Binary P6, 8 bit."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    h, w = img.shape[:2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_header(data: bytes, magic: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"expected {magic!r} header, found {tokens[0]!r}")
    return int(tokens[1]), int(tokens[2]), tokens[3], pos + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, off = _read_header(data, b"P6")
    if int(maxval) != 255:
        raise ValueError("only 8-bit PPM is supported")
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off)
    return arr.reshape(h, w, 3).astype(np.float64) / 255.0


def write_depth(path, depth) -> None:
    """Single-channel float dump: PPM-style header 'Pf1', then little-endian f32 rows."""
    z = np.asarray(depth, dtype="<f4")
    h, w = z.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf1\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(z.tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, _, off = _read_header(data, b"Pf1")
    return np.frombuffer(data, dtype="<f4", count=w * h, offset=off).reshape(h, w).astype(np.float64)
