import numpy as np
import pytest

from probesurf.geometry import TriMesh, chamfer, marching_cubes_dense
from probesurf.grid import dense_node_positions
from probesurf.render import Camera, look_at
from probesurf.synth import (AnalyticScene, Box, DirectionalLight, Material, PointLight, Sphere, Torus,
                             camera_positions, glossy_sphere_scene, icosphere, load_scene, make_cameras,
                             make_dataset, raytrace, sample_surface, schlick, shade)


def unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x)


# ---------------------------------------------------------------- shading
def test_schlick_normal_and_grazing():
    assert schlick(1.0, 0.08) == pytest.approx(0.08, abs=1e-15)
    assert schlick(1e-9, 0.08) == pytest.approx(1.0, abs=1e-8)
    assert np.all(np.diff(schlick(np.linspace(0, 1, 50), 0.04)) < 0)


def test_specular_fresnel_equals_r0_at_normal_incidence():
    """View and light along the normal: the specular part is exactly R0 * (e+2)/2pi."""
    n = np.array([[0.0, 0.0, 1.0]])
    p = np.zeros((1, 3))
    mat = Material(albedo=(0.0, 0.0, 0.0), r0=0.08, exponent=10.0)
    sc = AnalyticScene([Sphere()], [DirectionalLight((0, 0, -1), (1.0, 1.0, 1.0))])
    c = shade(p, n, n, sc, mat, clip=False)
    np.testing.assert_allclose(c[0], 0.08 * 12 / (2 * np.pi), rtol=1e-14)


def test_lambert_hand_computation():
    n = np.array([0.0, 0.0, 1.0])
    v = unit([1, 0, 1])
    r = 2 * np.dot(n, v) * n - v
    side = np.array([0.0, 1.0, 0.0])  # perpendicular to both v and r
    w = 0.3 * r + np.sqrt(1 - 0.09) * side  # light direction, perpendicular to v
    assert abs(np.dot(w, v)) < 1e-15
    p = np.array([0.1, -0.2, 0.3])
    L = np.array([2.0, 3.0, 4.0])
    light = PointLight(tuple(p + 2.0 * w), tuple(4.0 * L))  # radiance I/d^2 = L
    albedo = np.array([0.5, 0.4, 0.3])
    mat = Material(albedo=tuple(albedo), r0=0.0, exponent=200.0)
    c = shade(p[None], n[None], v[None], AnalyticScene([Sphere()], [light]), mat, clip=False)[0]
    expect = albedo / np.pi * np.dot(w, n) * L
    np.testing.assert_allclose(c, expect, rtol=1e-12)


def test_back_facing_light_contributes_nothing():
    n = np.array([[0.0, 0.0, 1.0]])
    sc = AnalyticScene([Sphere()], [DirectionalLight((0, 0, 1), (5, 5, 5))])
    assert not np.any(shade(np.zeros((1, 3)), n, n, sc, Material()))


def directional_albedo(mat, v, n_dirs=40):
    """Hemispherical integral of f_r cos over light directions (midpoint rule)."""
    n = np.array([0.0, 0.0, 1.0])
    th = (np.arange(n_dirs) + 0.5) * (np.pi / 2) / n_dirs
    ph = (np.arange(2 * n_dirs) + 0.5) * (2 * np.pi) / (2 * n_dirs)
    total = np.zeros(3)
    dA = (np.pi / 2 / n_dirs) * (2 * np.pi / (2 * n_dirs))
    for t in th:
        for f in ph:
            w = np.array([np.sin(t) * np.cos(f), np.sin(t) * np.sin(f), np.cos(t)])
            sc = AnalyticScene([Sphere()], [DirectionalLight(tuple(-w), (1.0, 1.0, 1.0))])
            total += shade(np.zeros((1, 3)), n[None], v[None], sc, mat, clip=False)[0] * np.sin(t) * dA
    return total


@pytest.mark.parametrize("view_deg", [0.0, 30.0, 60.0])
def test_energy_sanity_directional_albedo(view_deg):
    mat = glossy_sphere_scene().primitives[0].material
    a = np.radians(view_deg)
    alb = directional_albedo(mat, np.array([np.sin(a), 0.0, np.cos(a)]))
    assert np.all(alb <= 1.0)
    # the diffuse part alone integrates to the albedo
    assert np.all(alb >= np.asarray(mat.albedo) - 1e-2)


def test_shading_independent_of_batch():
    sc = glossy_sphere_scene()
    rng = np.random.default_rng(0)
    p = rng.standard_normal((50, 3))
    p = 0.5 * p / np.linalg.norm(p, axis=1, keepdims=True)
    n = sc.normal(p)
    v = np.repeat(unit([0.2, -0.9, 0.4])[None], 50, axis=0)
    mat = sc.primitives[0].material
    full = shade(p, n, v, sc, mat)
    for i in (0, 17, 49):
        np.testing.assert_array_equal(shade(p[i:i + 1], n[i:i + 1], v[i:i + 1], sc, mat)[0], full[i])


# ---------------------------------------------------------------- primitives
@pytest.mark.parametrize("prim", [Sphere((0.1, 0, 0), 0.4), Box((0, 0.1, 0), (0.3, 0.2, 0.25)),
                                  Torus((0, 0, 0.05), 0.4, 0.15)])
def test_primitive_sdf_is_exact(prim):
    rng = np.random.default_rng(1)
    p = rng.uniform(-1, 1, (2000, 3))
    h = 1e-6
    grad = np.stack([(prim.sdf(p + h * e) - prim.sdf(p - h * e)) / (2 * h) for e in np.eye(3)], axis=-1)
    gnorm = np.linalg.norm(grad, axis=1)
    # away from the medial axis the gradient has unit length
    ok = np.abs(gnorm - 1) < 1e-4
    assert ok.mean() > 0.97
    # analytic normals agree with the numerical gradient
    close = ok & (np.abs(prim.sdf(p)) < 0.3)
    np.testing.assert_allclose(prim.normal(p[close]), grad[close], atol=1e-4)


def test_union_is_min():
    a, b = Sphere((-0.3, 0, 0), 0.2), Sphere((0.3, 0, 0), 0.25)
    sc = AnalyticScene([a, b], [])
    p = np.random.default_rng(2).uniform(-1, 1, (100, 3))
    np.testing.assert_array_equal(sc.sdf(p), np.minimum(a.sdf(p), b.sdf(p)))


# ---------------------------------------------------------------- raytrace
def test_empty_view():
    sc = glossy_sphere_scene()
    cam = Camera(20, 20, 8, 8, 16, 16, look_at((3, 0, 0), target=(6, 0, 0)))
    img, mask, depth = raytrace(sc, cam, background=(0.1, 0.2, 0.3))
    assert not mask.any()
    np.testing.assert_array_equal(img, np.broadcast_to([0.1, 0.2, 0.3], img.shape))


def test_disc_radius_and_center_depth():
    sc = glossy_sphere_scene()
    res, D, r = 65, 3.0, 0.5
    f = 80.0
    c = res / 2
    cam = Camera(f, f, c, c, res, res, look_at((0, -D, 0)))
    _, mask, depth = raytrace(sc, cam)
    R = f * np.tan(np.arcsin(r / D))
    v, u = np.mgrid[0:res, 0:res]
    rho = np.hypot(u + 0.5 - c, v + 0.5 - c)
    assert np.all(mask[rho < R - 1])
    assert not np.any(mask[rho > R + 1])
    assert depth[res // 2, res // 2] == pytest.approx(D - r, abs=1e-4)


def test_mask_equals_hit_pixels_and_colors_bounded():
    sc = glossy_sphere_scene()
    cam = make_cameras(1, 32, seed=3)[0]
    img, mask, depth = raytrace(sc, cam)
    assert np.all(depth[mask] > 0) and np.all(img >= 0) and np.all(img <= 1)
    o, d = cam.rays()
    hit_pts = (o + depth.reshape(-1)[:, None] * d)[mask.reshape(-1)]
    assert np.max(np.abs(sc.sdf(hit_pts))) < 1e-5


# ---------------------------------------------------------------- dataset
def test_camera_positions():
    for placement in ("sphere", "ring"):
        pos = camera_positions(12, 2.7, placement, seed=4)
        np.testing.assert_allclose(np.linalg.norm(pos, axis=1), 2.7, rtol=1e-12)
    with pytest.raises(ValueError):
        camera_positions(3, 1.0, "spiral")


def test_cameras_look_at_origin_and_are_valid():
    for cam in make_cameras(8, 32, seed=5):
        cam.validate()
        u, v = _project(cam, np.zeros(3))
        assert abs(u - cam.cx) < 1e-9 and abs(v - cam.cy) < 1e-9


def _project(cam, p):
    R, t = cam.pose[:, :3], cam.pose[:, 3]
    q = R.T @ (p - t)
    return cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy


def test_make_dataset_single_view_and_determinism():
    sc = glossy_sphere_scene()
    ds = make_dataset(sc, 1, 24, seed=6, n_points=500)
    assert len(ds) == 1 and ds.images[0].shape == (24, 24, 3) and ds.masks[0].shape == (24, 24)
    ds2 = make_dataset(sc, 1, 24, seed=6, n_points=500)
    assert ds.images[0].tobytes() == ds2.images[0].tobytes()
    assert ds.points_gt.tobytes() == ds2.points_gt.tobytes()
    ds3 = make_dataset(sc, 1, 24, seed=7, n_points=500)
    assert ds.images[0].tobytes() != ds3.images[0].tobytes()


def test_sample_surface_on_surface():
    sc = AnalyticScene([Torus(), Box((0.6, 0, 0), (0.1, 0.1, 0.1))], [])
    pts = sample_surface(sc, 2000, seed=0)
    assert pts.shape == (2000, 3)
    assert np.max(np.abs(sc.sdf(pts))) < 1e-6


# ---------------------------------------------------------------- oracle self-test
def test_oracle_marching_cubes_vs_analytic_mesh():
    res, extent = 64, 2.0
    vs = extent / res
    lo = np.full(3, -1.0)
    s = np.linalg.norm(dense_node_positions(lo, vs, (res,) * 3), axis=-1) - 0.5
    mc = marching_cubes_dense(s, lo + 0.5 * vs, vs)
    v, f = icosphere(0.5, 5)
    r = chamfer(mc, TriMesh(v, f), n_samples=20000)
    assert r["mean"] / 1000 < vs


def test_oracle_marching_cubes_torus_cloud():
    res = 64
    vs = 2.0 / res
    lo = np.full(3, -1.0)
    tor = Torus()
    mc = marching_cubes_dense(tor.sdf(dense_node_positions(lo, vs, (res,) * 3)), lo + 0.5 * vs, vs)
    pts = sample_surface(AnalyticScene([tor], []), 20000)
    r = chamfer(mc, pts, n_samples=20000)
    assert r["mean"] / 1000 < vs


def test_scene_config_file(tmp_path):
    from pathlib import Path

    cfg = Path(__file__).resolve().parents[1] / "configs" / "glossy_sphere.toml"
    assert load_scene(cfg) == glossy_sphere_scene()
    bad = tmp_path / "bad.toml"
    bad.write_text('[[primitives]]\ntype = "cone"\n')
    with pytest.raises(ValueError):
        load_scene(bad)
