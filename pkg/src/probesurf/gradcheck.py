"""Finite-difference audit of the full training gradient on a tiny scene."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .decoder import N_FRESNEL, DecoderMlp
from .grid import init_sphere
from .render import Camera, RenderOptions, look_at
from .train import batch_objective

PARAM_CLASSES = ("sdf", "planes", "probes", "mlp", "camera_bias")


@dataclass
class ClassReport:
    name: str
    n_checked: int
    rel_error: float  # ||analytic - numeric|| / max(||analytic||, ||numeric||)
    max_abs_error: float

    def ok(self, tol: float) -> bool:
        return bool(self.rel_error < tol)


def tiny_scene(seed: int = 0, resolution: int = 32, image_size: int = 4, order: int = 2):
    """Sphere grid of at most 8 tiles, one 4x4 view with mixed mask, random features."""
    rng = np.random.default_rng(seed)
    grid = init_sphere((-1.0, -1.0, -1.0), 2.0, resolution, (0.03, -0.02, 0.01), 0.5,
                       n_s=3, n_a=3, order=order, dtype=np.float64)
    grid.sdf_raw += 0.02 * rng.standard_normal(grid.sdf_raw.shape)
    grid.planes[:] = rng.uniform(0.3, 1.0, grid.planes.shape)
    grid.probes[:] = 0.3 * rng.standard_normal(grid.probes.shape)
    grid.smooth()
    mlp = DecoderMlp.init(grid.n_s + grid.n_a + N_FRESNEL, rng, num_cameras=2, dtype=np.float64)
    mlp.b1[:] = 0.1 * rng.standard_normal(mlp.b1.shape)
    mlp.b3[:] = 0.1 * rng.standard_normal(mlp.b3.shape)
    mlp.camera_bias[:] = 0.1 * rng.standard_normal(mlp.camera_bias.shape)
    f = float(image_size)
    c = image_size / 2.0
    cam = Camera(f, f, c, c, image_size, image_size, look_at((0.4, -2.4, 0.6)), 1)
    gt = rng.uniform(0.2, 0.8, (image_size, image_size, 3))
    o, d = cam.rays()
    # silhouette of a slightly smaller sphere, so both mask branches are exercised
    oc = o
    b = np.sum(oc * d, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - 0.45 ** 2)
    mask = (disc > 0).reshape(image_size, image_size)
    return grid, mlp, [(cam, gt, mask)]


def default_hyper() -> dict:
    return {"lambda_photo": 40.0, "lambda_sdf": 0.3, "lambda_eik": 0.1, "lambda_normal": 0.05,
            "lambda_features": 0.02, "lambda_probes": 0.1}


def _param_views(grid, mlp) -> dict:
    out = {"sdf": [("sdf_raw", grid.sdf_raw)], "planes": [("planes", grid.planes)],
           "probes": [("probes", grid.probes)],
           "mlp": [(k, v) for k, v in mlp.parameters().items() if k != "camera_bias"],
           "camera_bias": [("camera_bias", mlp.camera_bias)]}
    return out


def run_gradcheck(seed: int = 0, h: float = 1e-4, per_class: int = 12, tau_voxels: float = 4.0,
                  log=None) -> list:
    """Compare analytic and central-difference gradients for every parameter class."""
    grid, mlp, views = tiny_scene(seed)
    hyper = default_hyper()
    opts = RenderOptions(tau=tau_voxels / grid.voxel_size, decode_eps=0.0)
    base = batch_objective(grid, mlp, views, hyper, opts)
    frozen = base.frozen

    def f():
        grid.smooth()
        return batch_objective(grid, mlp, views, hyper, opts, frozen=frozen).total

    rng = np.random.default_rng(seed + 1)
    reports = []
    for cls, entries in _param_views(grid, mlp).items():
        an, nu = [], []
        for name, arr in entries:
            g = base.grads[name]
            flat_g = g.reshape(-1)
            k = max(1, per_class // len(entries))
            # the largest entries plus a few random ones
            top = np.argsort(-np.abs(flat_g))[: (k + 1) // 2]
            rand = rng.choice(flat_g.size, size=k - len(top), replace=False) if k > len(top) else []
            flat = arr.reshape(-1)
            for i in np.unique(np.concatenate([top, rand]).astype(np.int64)):
                old = flat[i]
                flat[i] = old + h
                fp = f()
                flat[i] = old - h
                fm = f()
                flat[i] = old
                an.append(flat_g[i])
                nu.append((fp - fm) / (2.0 * h))
        grid.smooth()
        an, nu = np.array(an), np.array(nu)
        denom = max(np.linalg.norm(an), np.linalg.norm(nu), 1e-300)
        rep = ClassReport(cls, len(an), float(np.linalg.norm(an - nu) / denom),
                          float(np.max(np.abs(an - nu))))
        if log is not None:
            log(f"gradcheck class={rep.name} n={rep.n_checked} rel_err={rep.rel_error:.3e} "
                f"max_abs_err={rep.max_abs_error:.3e}")
        reports.append(rep)
    return reports


def gradcheck_main(seed: int = 0, tol: float = 1e-4, log=print) -> bool:
    t0 = time.perf_counter()
    reports = run_gradcheck(seed, log=log)
    ok = all(r.ok(tol) for r in reports)
    log(f"gradcheck result={'pass' if ok else 'fail'} tol={tol:g} seconds={time.perf_counter() - t0:.2f}")
    return ok
