"""Analytic SDF scenes rendered with discrete lights: the ground-truth fixture.

Shading follows the hemispherical rendering integral collapsed onto point and
directional lights, with a Lambertian lobe plus a Schlick-Fresnel weighted,
energy-normalized Phong lobe.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .io import Dataset
from .render import Camera, look_at
from .schedule import tomllib

TRACE_EPS = 1e-5


@dataclass
class Material:
    albedo: tuple = (0.6, 0.6, 0.6)
    r0: float = 0.04
    exponent: float = 16.0


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    material: Material = field(default_factory=Material)

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def normal(self, p):
        d = p - np.asarray(self.center)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half: tuple = (0.3, 0.3, 0.3)
    material: Material = field(default_factory=Material)

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(np.max(q, axis=-1), 0.0)

    def normal(self, p):
        d = p - np.asarray(self.center)
        q = np.abs(d) - np.asarray(self.half)
        sgn = np.where(d < 0, -1.0, 1.0)
        out = np.maximum(q, 0.0) * sgn
        nrm = np.linalg.norm(out, axis=-1, keepdims=True)
        inside = nrm[..., 0] <= 0
        face = np.zeros_like(d)
        ax = np.argmax(q, axis=-1)
        np.put_along_axis(face, ax[..., None], np.take_along_axis(sgn, ax[..., None], -1), -1)
        return np.where(inside[..., None], face, out / np.where(nrm > 0, nrm, 1.0))


@dataclass
class Torus:
    center: tuple = (0.0, 0.0, 0.0)
    major: float = 0.4
    minor: float = 0.15
    material: Material = field(default_factory=Material)

    def _ring(self, d):
        rxy = np.linalg.norm(d[..., :2], axis=-1, keepdims=True)
        ring = d.copy()
        ring[..., :2] = d[..., :2] / np.where(rxy > 0, rxy, 1.0) * self.major
        ring[..., 2] = 0.0
        return ring

    def sdf(self, p):
        d = p - np.asarray(self.center)
        q = np.stack([np.linalg.norm(d[..., :2], axis=-1) - self.major, d[..., 2]], axis=-1)
        return np.linalg.norm(q, axis=-1) - self.minor

    def normal(self, p):
        d = p - np.asarray(self.center)
        v = d - self._ring(d)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class PointLight:
    position: tuple
    intensity: tuple = (1.0, 1.0, 1.0)


@dataclass
class DirectionalLight:
    direction: tuple  # direction the light travels toward the scene
    irradiance: tuple = (1.0, 1.0, 1.0)


@dataclass
class AnalyticScene:
    primitives: list
    lights: list

    def sdf(self, p):
        """Union of primitives (pointwise min)."""
        p = np.asarray(p, dtype=np.float64)
        return np.min(np.stack([pr.sdf(p) for pr in self.primitives]), axis=0)

    def closest(self, p):
        return np.argmin(np.stack([pr.sdf(p) for pr in self.primitives]), axis=0)

    def normal(self, p):
        idx = self.closest(p)
        out = np.zeros_like(p)
        for i, pr in enumerate(self.primitives):
            m = idx == i
            if np.any(m):
                out[m] = pr.normal(p[m])
        return out


def schlick(cos_theta, r0):
    """Fresnel reflectance ``R0 + (1 - R0)(1 - cos)^5``."""
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), 0.0, 1.0)
    return r0 + (1.0 - r0) * (1.0 - c) ** 5


def light_terms(p, light):
    """Unit direction toward the light and incident radiance at ``p``."""
    if isinstance(light, PointLight):
        d = np.asarray(light.position) - p
        dist2 = np.sum(d * d, axis=-1, keepdims=True)
        return d / np.sqrt(dist2), np.asarray(light.intensity) / dist2
    w = -np.asarray(light.direction, dtype=np.float64)
    w = w / np.linalg.norm(w)
    return np.broadcast_to(w, p.shape), np.broadcast_to(np.asarray(light.irradiance), p.shape)


def shade(p, n, v, scene: AnalyticScene, material: Material | None = None, materials=None, clip=True):
    """Outgoing color at surface points (``v`` points toward the viewer)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if materials is None:
        mats = [material or Material()] * len(p)
        albedo = np.array([m.albedo for m in mats], dtype=np.float64)
        r0 = np.array([m.r0 for m in mats])
        e = np.array([m.exponent for m in mats])
    else:
        albedo, r0, e = materials
    refl = 2.0 * np.sum(n * v, axis=-1, keepdims=True) * n - v
    out = np.zeros_like(p)
    for light in scene.lights:
        w, L = light_terms(p, light)
        cos_n = np.maximum(np.sum(w * n, axis=-1), 0.0)
        h = w + v
        h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
        R = schlick(np.sum(v * h, axis=-1), r0)
        lobe = (e + 2.0) / (2.0 * np.pi) * np.maximum(np.sum(refl * w, axis=-1), 0.0) ** e
        fr = albedo / np.pi + (R * lobe)[:, None]
        out += fr * L * cos_n[:, None]
    return np.clip(out, 0.0, 1.0) if clip else out


def raytrace(scene: AnalyticScene, camera: Camera, background=(0.0, 0.0, 0.0),
             max_iter: int = 2000, far: float = 100.0):
    """Sphere-trace every pixel; returns ``(image, mask, depth)``."""
    o, d = camera.rays()
    n = len(o)
    t = np.zeros(n)
    hit = np.zeros(n, bool)
    active = np.arange(n)
    for _ in range(max_iter):
        if len(active) == 0:
            break
        dist = scene.sdf(o[active] + t[active, None] * d[active])
        done = dist < TRACE_EPS
        hit[active[done]] = True
        t[active] += np.where(done, 0.0, dist)
        active = active[~done & (t[active] < far)]
    img = np.broadcast_to(np.asarray(background, dtype=np.float64), (n, 3)).copy()
    depth = np.full(n, np.inf)
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        nrm = scene.normal(p)
        idx = scene.closest(p)
        mats = [scene.primitives[i].material for i in idx]
        albedo = np.array([m.albedo for m in mats], dtype=np.float64)
        r0 = np.array([m.r0 for m in mats])
        e = np.array([m.exponent for m in mats])
        img[hit] = shade(p, nrm, -d[hit], scene, materials=(albedo, r0, e))
        depth[hit] = t[hit]
    shape = (camera.height, camera.width)
    return img.reshape(shape + (3,)), hit.reshape(shape), depth.reshape(shape)


def camera_positions(n_views: int, radius: float, placement: str = "sphere", seed: int = 0,
                     elevation: float = 0.3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if placement == "ring":
        phi = 2 * np.pi * (np.arange(n_views) + rng.uniform()) / n_views
        z = np.full(n_views, np.sin(elevation))
        r = np.cos(elevation)
        return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if placement != "sphere":
        raise ValueError(f"unknown camera placement {placement!r}")
    # Fibonacci lattice, randomly rotated by the seed
    i = np.arange(n_views) + 0.5
    z = 1.0 - 2.0 * i / n_views
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    r = np.sqrt(1.0 - z * z)
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return radius * pts @ q.T


def make_cameras(n_views: int, resolution: int, distance: float = 3.0, fov_deg: float = 40.0,
                 placement: str = "sphere", seed: int = 0) -> list:
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    c = resolution / 2.0
    return [Camera(f, f, c, c, resolution, resolution, look_at(pos), i)
            for i, pos in enumerate(camera_positions(n_views, distance, placement, seed))]


def make_dataset(scene: AnalyticScene, n_views: int, resolution: int, placement: str = "sphere",
                 distance: float = 3.0, fov_deg: float = 40.0, seed: int = 0,
                 n_points: int = 20000) -> Dataset:
    cams = make_cameras(n_views, resolution, distance, fov_deg, placement, seed)
    images, masks = [], []
    for cam in cams:
        img, mask, _ = raytrace(scene, cam)
        images.append(img)
        masks.append(mask)
    pts = sample_surface(scene, n_points, seed)
    return Dataset(cams, images, masks, pts)


def sample_surface(scene: AnalyticScene, n: int, seed: int = 0) -> np.ndarray | None:
    """Points on the scene surface, projected from a uniform volume sample."""
    if n <= 0:
        return None
    rng = np.random.default_rng(seed + 7919)
    lo, hi = scene_bounds(scene)
    pts = []
    got = 0
    while got < n:
        p = rng.uniform(lo, hi, size=(4 * n, 3))
        for _ in range(8):
            p = p - scene.sdf(p)[:, None] * scene.normal(p)
        ok = np.abs(scene.sdf(p)) < 1e-6
        pts.append(p[ok])
        got += int(ok.sum())
    return np.concatenate(pts)[:n]


def scene_bounds(scene: AnalyticScene):
    lo, hi = np.full(3, np.inf), np.full(3, -np.inf)
    for pr in scene.primitives:
        c = np.asarray(pr.center, dtype=np.float64)
        if isinstance(pr, Sphere):
            r = np.full(3, pr.radius)
        elif isinstance(pr, Box):
            r = np.asarray(pr.half, dtype=np.float64)
        else:
            r = np.array([pr.major + pr.minor] * 2 + [pr.minor])
        lo, hi = np.minimum(lo, c - r), np.maximum(hi, c + r)
    return lo, hi


def glossy_sphere_scene(r0: float = 0.08, radius: float = 0.5) -> AnalyticScene:
    """The reference fixture: one glossy sphere lit by two point lights."""
    mat = Material(albedo=(0.55, 0.35, 0.25), r0=r0, exponent=12.0)
    lights = [PointLight((2.0, -1.5, 2.0), (20.0, 20.0, 20.0)),
              PointLight((-2.0, 1.5, -1.0), (12.0, 12.0, 14.0))]
    return AnalyticScene([Sphere((0.0, 0.0, 0.0), radius, mat)], lights)


def icosphere(radius: float = 1.0, subdivisions: int = 5, center=(0.0, 0.0, 0.0)):
    """Reference triangle mesh of a sphere: ``(vertices, faces)``."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1) + len(v)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        f = np.concatenate([np.stack([a, m[0], m[2]], 1), np.stack([b, m[1], m[0]], 1),
                            np.stack([c, m[2], m[1]], 1), np.stack(m, 1)])
        v = np.concatenate([v, mid])
    return v * radius + np.asarray(center, dtype=np.float64), f


# ---------------------------------------------------------------- config
def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def scene_from_dict(d: dict) -> AnalyticScene:
    prims = []
    for pd in d.get("primitives", []):
        pd = _tuples(pd)
        kind = pd.pop("type")
        mat = Material(**_tuples(pd.pop("material", {})))
        cls = {"sphere": Sphere, "box": Box, "torus": Torus}.get(kind)
        if cls is None:
            raise ValueError(f"unknown primitive type {kind!r}")
        prims.append(cls(material=mat, **pd))
    lights = []
    for ld in d.get("lights", []):
        ld = _tuples(ld)
        kind = ld.pop("type")
        if kind == "point":
            lights.append(PointLight(**ld))
        elif kind == "directional":
            lights.append(DirectionalLight(**ld))
        else:
            raise ValueError(f"unknown light type {kind!r}")
    if not prims:
        raise ValueError("scene has no primitives")
    return AnalyticScene(prims, lights)


def load_scene(path) -> AnalyticScene:
    """Scene from a TOML file with ``[[primitives]]`` and ``[[lights]]`` tables."""
    with open(path, "rb") as fh:
        return scene_from_dict(tomllib.load(fh))
