import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advdrive.field import Aabb, RigidTransform, VoxelField, inverse_softplus
from advdrive.render import (Camera, QuadConfig, composite_layers, composite_pixel, generate_rays,
                             march_compiled, march_field, march_field_vjp, opaque_depth_composite, read_depth,
                             read_ppm, render_frame, render_vjp_color, write_depth, write_ppm)
from advdrive.rig import look_rotation
from advdrive.scenes import box_object
from conftest import random_field


def camera_at(eye, target, w=8, h=8, f=6.0, near=0.05, far=6.0):
    rot = look_rotation(np.asarray(target, float) - np.asarray(eye, float))
    return Camera(RigidTransform(rot, np.asarray(eye, float)), f, w, h, near, far)


def slab(sigma, color, length=1.0):
    f = VoxelField.constant((2, 2, 2), Aabb([0, -1, -1], [length, 1, 1]), density=float(inverse_softplus(sigma)),
                            color=np.log(np.asarray(color) / (1 - np.asarray(color))))
    return f


# --- rays ----------------------------------------------------------------

def test_single_pixel_ray_is_forward():
    cam = camera_at([0, 0, 0], [1, 2, 3], w=1, h=1)
    r = generate_rays(cam)
    np.testing.assert_allclose(r.directions[0], cam.forward, atol=1e-12)


def test_center_pixel_of_odd_image_is_forward():
    cam = camera_at([0, 0, 0], [1, -2, 0.5], w=5, h=7)
    r = generate_rays(cam)
    np.testing.assert_allclose(r.directions[3 * 5 + 2], cam.forward, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(r.directions, axis=1), 1.0, atol=1e-12)


def test_corner_pixel_tangent_offset():
    w, f = 6, 4.0
    cam = Camera(RigidTransform(), f, w, w)
    d = generate_rays(cam).directions[0]
    assert d[0] / d[2] == pytest.approx((0.5 - w / 2) / f, abs=1e-12)
    assert d[1] / d[2] == pytest.approx((0.5 - w / 2) / f, abs=1e-12)


# --- quadrature ----------------------------------------------------------

def test_vacuum_is_transparent():
    f = VoxelField.constant((3, 3, 3), Aabb([0] * 3, [1] * 3), density=-60.0)
    r = march_field(f, [[-1, 0.5, 0.5]], [[1, 0, 0]], 16, 0.0, 3.0)
    assert r.alpha[0] < 1e-20 and np.all(np.abs(r.color) < 1e-20)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0])
def test_homogeneous_slab(sigma):
    c = np.array([0.2, 0.5, 0.9])
    f = slab(sigma, c)
    r = march_field(f, [[0, 0, 0]], [[1, 0, 0]], 256, 0.0, 1.0)
    assert abs(r.alpha[0] - (1 - math.exp(-sigma))) < 1e-3
    np.testing.assert_allclose(r.color[0], r.alpha[0] * c, atol=1e-12)


def test_opaque_wall_depth():
    f = VoxelField.constant((2, 2, 2), Aabb([2.0, -1, -1], [3.0, 1, 1]), density=60.0)
    n = 64
    near, far = 0.0, 4.0
    r = march_field(f, [[0, 0, 0]], [[1, 0, 0]], n, near, far)
    assert r.alpha[0] > 1 - 1e-9
    assert abs(r.depth[0] - 2.0) <= (far - near) / n


def test_transmittance_monotone_and_energy_bound():
    rng = np.random.default_rng(0)
    f = random_field(rng, res=(5, 4, 6), dens_scale=3)
    o = rng.uniform(-0.5, 1.5, (200, 3))
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = march_field(f, o, d, 32, 0.0, 2.0, with_cache=True)
    assert np.all(np.diff(r.cache.trans_after, axis=1) <= 0)
    assert np.all((r.alpha >= 0) & (r.alpha <= 1))
    assert np.all(r.color <= r.alpha[:, None] + 1e-12)


def test_quadrature_convergence():
    rng = np.random.default_rng(1)
    res = (4, 4, 4)
    f = VoxelField.constant(res, Aabb([0] * 3, [1] * 3))
    lat = f.lattice_points()
    dens = 0.3 * np.sin(3 * lat[..., 0]) + 0.2 * lat[..., 1] - 0.5
    f = VoxelField(res, dens, np.stack([np.cos(2 * lat[..., k]) for k in range(3)], -1), f.bounds)
    o = np.column_stack([np.full(30, -0.5), rng.uniform(0.1, 0.9, (30, 2))])
    d = np.tile([1.0, 0, 0], (30, 1))
    a = march_field(f, o, d, 512, 0.5, 1.5)
    b = march_field(f, o, d, 1024, 0.5, 1.5)
    assert np.max(np.abs(a.color - b.color)) < 1e-3
    assert np.max(np.abs(a.alpha - b.alpha)) < 1e-3


def test_compiled_matches_reference():
    rng = np.random.default_rng(2)
    f = random_field(rng, res=(6, 5, 4), dens_scale=2)
    o = rng.uniform(-0.3, 1.3, (300, 3))
    d = rng.normal(size=(300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t0, t1 = f.bounds.intersect(o, d)
    t0 = np.maximum(t0, 0.0)
    t1 = np.where(t1 > t0, t1, t0)
    a = march_field(f, o, d, 24, t0, t1)
    b = march_compiled(f, o, d, 24, t0, t1)
    np.testing.assert_allclose(b.color, a.color, atol=1e-9)
    np.testing.assert_allclose(b.alpha, a.alpha, atol=1e-9)
    vis = a.alpha > 1e-6
    np.testing.assert_allclose(b.depth[vis], a.depth[vis], rtol=1e-6)


def test_march_vjp_density_and_color_fd():
    rng = np.random.default_rng(3)
    f = random_field(rng, res=(3, 3, 3))
    o = rng.uniform(-0.2, 1.2, (20, 3))
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    gc, ga = rng.normal(size=(20, 3)), rng.normal(size=20)

    def loss(fld):
        r = march_field(fld, o, d, 12, 0.0, 1.5)
        return float(np.sum(r.color * gc) + np.sum(r.alpha * ga))

    r = march_field(f, o, d, 12, 0.0, 1.5, with_cache=True)
    gd, gcol = march_field_vjp(f, r.cache, gc, ga, wrt_density=True)
    eps = 1e-6
    for i in rng.choice(f.density_params.size, 8, replace=False):
        p = f.density_params.ravel().copy()
        p[i] += eps
        up = loss(VoxelField(f.resolution, p, f.color_params, f.bounds))
        p[i] -= 2 * eps
        dn = loss(VoxelField(f.resolution, p, f.color_params, f.bounds))
        assert (up - dn) / (2 * eps) == pytest.approx(gd.ravel()[i], rel=1e-5, abs=1e-9)
    for i in rng.choice(f.color_params.size, 8, replace=False):
        p = f.color_params.ravel().copy()
        p[i] += eps
        up = loss(f.with_color_params(p))
        p[i] -= 2 * eps
        dn = loss(f.with_color_params(p))
        assert (up - dn) / (2 * eps) == pytest.approx(gcol.ravel()[i], rel=1e-5, abs=1e-9)


# --- compositing ---------------------------------------------------------

def test_composite_example_exact():
    c, a, z = composite_pixel([((0, 0, 0), 1.0, 2.0), ((1, 0, 0), 0.5, 1.0)])
    np.testing.assert_allclose(c, [0.5, 0, 0], atol=1e-12)
    assert a == pytest.approx(1.0, abs=1e-12)
    assert z == 1.0


def test_composite_transparent_object_passes_scene():
    c, a, z = composite_pixel([((0.2, 0.3, 0.4), 0.7, 3.0), ((1, 1, 1), 0.0, 0.0)])
    np.testing.assert_allclose(c, [0.2, 0.3, 0.4], atol=1e-12)
    assert a == pytest.approx(0.7, abs=1e-12) and z == 3.0


def test_composite_opaque_front_wins():
    c, a, z = composite_pixel([((0.2, 0.3, 0.4), 0.9, 3.0), ((0.9, 0.1, 0.5), 1.0, 1.0)])
    np.testing.assert_allclose(c, [0.9, 0.1, 0.5], atol=1e-12)
    assert a == 1.0 and z == 1.0


def test_composite_degenerate_returns_background():
    c, a, z = composite_pixel([((0.2, 0.3, 0.4), 0.0, 0.0), ((0.9, 0.1, 0.5), 0.0, 0.0)])
    assert a == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1), st.floats(0.1, 10)), min_size=1, max_size=4))
def test_vectorized_matches_pixel_fold(entries):
    rng = np.random.default_rng(len(entries))
    cols = rng.uniform(size=(len(entries), 3))
    ents = [(cols[k], a, z) for k, (a, z) in enumerate(entries)]
    c1, a1, z1 = composite_pixel(ents)
    pm = np.stack([cols[k] * e[1] for k, e in enumerate(ents)])[:, None, :]
    c2, a2, z2, _ = composite_layers(pm, np.array([[e[1]] for e in ents]), np.array([[e[2]] for e in ents]))
    np.testing.assert_allclose(c2[0], np.asarray(c1) * a1, atol=1e-12)
    assert a2[0] == pytest.approx(a1, abs=1e-12)
    assert z2[0] == pytest.approx(z1, abs=1e-12)


def test_composite_identity_and_opaque_extremes():
    rng = np.random.default_rng(4)
    c = rng.uniform(size=(1, 10, 3)) * 0.5
    a = np.full((1, 10), 0.5)
    z = rng.uniform(1, 2, (1, 10))
    out = composite_layers(np.vstack([c, np.zeros((1, 10, 3))]), np.vstack([a, np.zeros((1, 10))]),
                           np.vstack([z, np.zeros((1, 10))]))
    np.testing.assert_allclose(out[0], c[0])
    front = composite_layers(np.vstack([c, np.full((1, 10, 3), 0.3)]), np.vstack([a, np.ones((1, 10))]),
                             np.vstack([z, np.full((1, 10), 0.5)]))
    np.testing.assert_allclose(front[0], 0.3)


# --- frames --------------------------------------------------------------

def floor_scene():
    return VoxelField.constant((4, 4, 4), Aabb([-3, -3, -1], [3, 3, 0]), density=40.0, color=(0.3, 0.1, -0.4))


def test_no_objects_equals_scene_alone():
    cam = camera_at([0, 0, 0.5], [2, 0, 0])
    scene = floor_scene()
    a = render_frame(scene, [], cam)
    rays = generate_rays(cam)
    t0, t1 = scene.bounds.intersect(rays.origins, rays.directions)
    r = march_field(scene, rays.origins, rays.directions, QuadConfig().scene_samples, np.maximum(t0, cam.near),
                    np.minimum(t1, cam.far))
    expect = r.color + (1 - r.alpha)[:, None] * np.asarray(QuadConfig().background)
    np.testing.assert_allclose(a.color.reshape(-1, 3), expect, atol=1e-9)


def test_object_behind_camera_invisible():
    cam = camera_at([0, 0, 0.5], [2, 0, 0])
    box = box_object()
    a = render_frame(floor_scene(), [], cam)
    b = render_frame(floor_scene(), [(box, RigidTransform(translation=[-2.0, 0, 0.5]))], cam)
    np.testing.assert_array_equal(a.color, b.color)


def test_opaque_object_in_single_pixel():
    # 1-pixel-wide object on the optical axis of a 5x5 camera
    cam = Camera(RigidTransform(), 2.0, 5, 5)
    color = np.array([0.8, 0.1, 0.3])
    obj = VoxelField.constant((2, 2, 2), Aabb([-0.5] * 3, [0.5] * 3), density=60.0,
                              color=np.log(color / (1 - color)))
    xf = RigidTransform(translation=[0, 0, 3.0], scale=0.5)
    out = render_frame(None, [(obj, xf)], cam, QuadConfig(8, 64, (0.5, 0.5, 0.5)))
    np.testing.assert_allclose(out.color[2, 2], color, atol=1e-9)
    mask = np.ones((5, 5), bool)
    mask[2, 2] = False
    np.testing.assert_allclose(out.color[mask], 0.5)


def test_render_vjp_fd():
    rng = np.random.default_rng(5)
    cam = camera_at([0, 0, 0.4], [2, 0, 0.2], w=8, h=8, f=5.0)
    obj = box_object(resolution=4, half_extent=0.45)
    obj = obj.with_color_params(rng.normal(0, 1, obj.color_params.shape))
    xf = RigidTransform(euler_rotation_z(0.4), np.array([1.5, 0.1, 0.25]), 0.6)
    quad = QuadConfig(24, 24, compiled=False)
    out = render_frame(floor_scene(), [(obj, xf)], cam, quad, retain=True)
    seed = rng.normal(size=out.color.shape)
    g = render_vjp_color(out.state, seed)[0].ravel()
    nz = np.nonzero(np.abs(g) > 1e-4 * np.abs(g).max())[0]
    eps = 1e-5
    errs = []
    for i in rng.choice(nz, 20, replace=False):
        p = obj.color_params.ravel().copy()
        p[i] += eps
        up = np.sum(seed * render_frame(floor_scene(), [(obj.with_color_params(p), xf)], cam, quad).color)
        p[i] -= 2 * eps
        dn = np.sum(seed * render_frame(floor_scene(), [(obj.with_color_params(p), xf)], cam, quad).color)
        num = (up - dn) / (2 * eps)
        errs.append(abs(num - g[i]) / max(abs(num), abs(g[i])))
    assert max(errs) < 1e-4


def euler_rotation_z(yaw):
    from advdrive.field import euler_rotation

    return euler_rotation(0, 0, yaw)


def test_render_vjp_zero_cases():
    cam = camera_at([0, 0, 0.4], [2, 0, 0.2])
    obj = box_object(resolution=4)
    out = render_frame(floor_scene(), [(obj, RigidTransform(translation=[1.5, 0, 0.25]))], cam, retain=True)
    assert np.all(render_vjp_color(out.state, np.zeros(out.color.shape))[0] == 0)
    hidden = render_frame(floor_scene(), [(obj, RigidTransform(translation=[-3, 0, 0.25]))], cam, retain=True)
    assert np.all(render_vjp_color(hidden.state, np.ones(out.color.shape))[0] == 0)
    with pytest.raises(ValueError):
        render_vjp_color(render_frame(floor_scene(), [(obj, RigidTransform())], cam).state, np.ones(3))


def test_opaque_depth_composite_cases():
    color = np.full((4, 4, 3), 0.2)
    depth = np.full((4, 4), 2.0)
    oc = np.full((4, 4, 3), 0.9)
    oa = np.ones((4, 4))
    far = np.full((4, 4), 3.0)
    out, _ = opaque_depth_composite(color, depth, [(oc, oa, far)])
    np.testing.assert_array_equal(out, color)
    near = np.full((4, 4), 1.0)
    out, z = opaque_depth_composite(color, depth, [(oc, oa, near)])
    np.testing.assert_array_equal(out, oc)
    # half-occluded: object depth ramps across the columns, flips at column 2
    ramp = np.tile(np.array([1.0, 1.5, 2.5, 3.0]), (4, 1))
    out, _ = opaque_depth_composite(color, depth, [(oc, oa, ramp)])
    np.testing.assert_array_equal(out[:, :2], oc[:, :2])
    np.testing.assert_array_equal(out[:, 2:], color[:, 2:])


def test_image_files(tmp_path):
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(5, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
    dep = rng.uniform(size=(5, 7)).astype(np.float32).astype(np.float64)
    write_depth(tmp_path / "d.pfm", dep)
    np.testing.assert_array_equal(read_depth(tmp_path / "d.pfm"), dep)
