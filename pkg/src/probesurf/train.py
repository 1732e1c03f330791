"""Coarse-to-fine training: batch objective, Adam steps and the LOD loop."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adam import Adam
from .decoder import N_FRESNEL, DecoderMlp
from .geometry import psnr_masked
from .grid import SparseGrid, init_sphere, init_visual_hull, subdivide
from .io import Dataset
from .losses import loss_eikonal, loss_features, loss_normal, loss_photo, loss_probes, loss_sdf
from .render import (RenderOptions, new_grads, render_image, render_image_with_cache,
                     render_rays_backward)
from .schedule import LodConfig, TrainSchedule

REG_TERMS = ("sdf", "eik", "normal", "features", "probes")


class TrainError(ValueError):
    pass


@dataclass
class Objective:
    values: dict  # plain loss values per term (unweighted)
    total: float  # weighted sum of surrogate losses
    grads: dict  # w.r.t. sdf_raw, planes, probes and the MLP parameters
    frozen: dict  # reweighting factors, to be passed back for audits
    psnr: list = field(default_factory=list)
    renders: list = field(default_factory=list)


def _photo_image(grid, mlp, view, options, lam, ipb, frozen_w):
    cam, img, mask = view
    res = render_image_with_cache(grid, mlp, cam, options)
    term = loss_photo(res.rgb, img, mask, acc=res.alpha, images_per_batch=ipb, weights=frozen_w)
    g = new_grads(grid, mlp)
    g_rgb = (lam * term.grads["rgb"]).reshape(-1, 3)
    g_acc = (lam * term.grads["acc"]).reshape(-1)
    for a, b, cache in res.caches:
        render_rays_backward(grid, mlp, cache, g_rgb[a:b], g_acc[a:b], options, g)
    return term, g, res


def batch_objective(grid: SparseGrid, mlp: DecoderMlp, views, hyper: dict, options: RenderOptions,
                    images_per_batch: int | None = None, frozen: dict | None = None,
                    pool: ThreadPoolExecutor | None = None, keep_renders: bool = False) -> Objective:
    """Weighted total loss over ``views`` (camera, image, mask) and its gradient.

    Per-image render/backward passes may run on ``pool``; their gradient
    buffers are private and are summed in view order, so the result does not
    depend on the thread count.
    """
    ipb = images_per_batch or max(len(views), 1)
    lam_photo = hyper["lambda_photo"]
    fz_photo = (frozen or {}).get("photo", [None] * len(views))
    jobs = [(grid, mlp, v, options, lam_photo, ipb, w) for v, w in zip(views, fz_photo)]
    if pool is not None and len(jobs) > 1:
        results = list(pool.map(lambda a: _photo_image(*a), jobs))
    else:
        results = [_photo_image(*a) for a in jobs]

    grads = new_grads(grid, mlp)
    values = {"photo": 0.0}
    total = 0.0
    new_frozen = {"photo": []}
    psnrs, renders = [], []
    for (term, g, res), (cam, img, mask) in zip(results, views):
        for k, v in g.items():
            grads[k] += v
        values["photo"] += term.value
        total += lam_photo * term.surrogate
        new_frozen["photo"].append(term.weights)
        if mask.any():
            psnrs.append(psnr_masked(res.rgb, img, mask))
        if keep_renders:
            renders.append(res)
    # gradient w.r.t. the smoothed field s; pulled through the Gaussian once at the end
    g_s = grid.scatter_padded(grads.pop("sdf_pad1"), 1)
    grads["sdf_raw"] = np.zeros(grid.sdf_raw.shape)

    regs = {
        "sdf": (hyper["lambda_sdf"], loss_sdf),
        "eik": (hyper["lambda_eik"], loss_eikonal),
        "normal": (hyper["lambda_normal"], loss_normal),
        "features": (hyper["lambda_features"], loss_features),
        "probes": (hyper["lambda_probes"], loss_probes),
    }
    for name, (lam, fn) in regs.items():
        w = (frozen or {}).get(name)
        term = fn(grid, weights=w) if w is not None else fn(grid)
        values[name] = term.value
        new_frozen[name] = term.weights
        if lam == 0.0:
            continue
        total += lam * term.surrogate
        for k, v in term.grads.items():
            if k == "sdf":
                g_s += lam * v
            else:
                grads[k] = grads[k] + lam * v
    grads["sdf_raw"] = grads["sdf_raw"] + grid.smooth_backward(g_s)
    return Objective(values, total, grads, new_frozen, psnrs, renders)


# ------------------------------------------------------------------ setup
def init_model(dataset: Dataset, schedule: TrainSchedule, seed: int = 0):
    """Initial grid (coarsest LOD) and decoder for a schedule."""
    sc = schedule.scene
    lod0 = schedule.lods[0]
    dtype = np.dtype(sc.dtype)
    lod = len(schedule.lods) - 1
    if sc.init == "sphere":
        grid = init_sphere(sc.bbox_min, sc.extent, sc.resolution, sc.center, sc.radius,
                           sc.n_s, sc.n_a, lod0.sh_order, sc.band, dtype, lod)
    elif sc.init == "visual_hull":
        ds = dataset.downsampled(lod0.image_divisor)
        grid = init_visual_hull(ds.cameras, ds.masks, sc.bbox_min, sc.extent, sc.resolution,
                                sc.n_s, sc.n_a, lod0.sh_order, sc.band, dtype, lod)
    else:
        raise TrainError(f"unknown init {sc.init!r}")
    if grid.n_tiles == 0:
        raise TrainError("initialization allocated no tiles (empty silhouettes or bad bbox?)")
    n_cam = 0
    if sc.camera_bias:
        n_cam = max(c.camera_id for c in dataset.cameras) + 1
    mlp = DecoderMlp.init(sc.n_s + sc.n_a + N_FRESNEL, np.random.default_rng(seed),
                          num_cameras=n_cam, dtype=dtype)
    return grid, mlp


def learning_rates(grid: SparseGrid, mlp: DecoderMlp, hyper: dict) -> dict:
    """Per-parameter rates: SDF steps are in voxel units, features and MLP unscaled."""
    lr = {"sdf_raw": hyper["lr_voxels"] * grid.voxel_size, "planes": hyper["lr_voxels"]}
    for k in ["probes", *mlp.parameters()]:
        lr[k] = hyper["lr_mlp"]
    return lr


class ViewOrder:
    """Round-robin over views with a fresh seeded shuffle every epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> list:
        out = []
        for _ in range(k):
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def format_log(step: int, lod_index: int, it: int, obj: Objective, hyper: dict) -> str:
    parts = [f"step={step}", f"lod={lod_index}", f"it={it}", f"total={obj.total:.6g}"]
    parts += [f"{k}={v:.6g}" for k, v in obj.values.items()]
    psnr = float(np.mean(obj.psnr)) if obj.psnr else float("nan")
    parts += [f"psnr={psnr:.3f}", f"tau={hyper['tau_voxels']:.4g}"]
    return " ".join(parts)


@dataclass
class TrainResult:
    grid: SparseGrid
    mlp: DecoderMlp
    log: list
    steps: int
    seconds: float


def train(dataset: Dataset, schedule: TrainSchedule, grid: SparseGrid | None = None,
          mlp: DecoderMlp | None = None, seed: int = 0, threads: int = 1, log=None,
          max_samples: int = 512, chunk: int = 4096) -> TrainResult:
    """Run every LOD of ``schedule``; ``log`` (callable) receives one line per step."""
    if len(dataset) == 0:
        raise TrainError("dataset is empty")
    if not schedule.lods:
        raise TrainError("schedule has no levels of detail")
    if grid is None or mlp is None:
        g0, m0 = init_model(dataset, schedule, seed)
        grid = g0 if grid is None else grid
        mlp = m0 if mlp is None else mlp
    expected_lod = len(schedule.lods) - 1
    if grid.lod != expected_lod or tuple(grid.resolution) != (schedule.scene.resolution,) * 3:
        raise TrainError(f"grid at lod {grid.lod} / resolution {tuple(grid.resolution)} does not "
                         f"match schedule start lod {expected_lod} / resolution "
                         f"{schedule.scene.resolution}")
    lines = []
    t0 = time.perf_counter()
    if schedule.total_iterations == 0:
        return TrainResult(grid, mlp, lines, 0, 0.0)

    rng = np.random.default_rng(seed)
    adam = Adam()
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    step = 0
    try:
        for li, lod in enumerate(schedule.lods):
            if li > 0:
                grid = subdivide(grid, schedule.scene.band)
            grid.set_order(lod.sh_order)
            ds = dataset.downsampled(lod.image_divisor)
            views = [(c, im, m) for c, im, m in zip(ds.cameras, ds.images, ds.masks)]
            order = ViewOrder(len(views), rng)
            for it in range(lod.iterations):
                hyper = lod.hyper(it)
                options = RenderOptions(tau=hyper["tau_voxels"] / grid.voxel_size,
                                        max_samples=max_samples, chunk=chunk,
                                        decode_eps=lod.decode_eps)
                batch = [views[i] for i in order.take(lod.images_per_batch)]
                obj = batch_objective(grid, mlp, batch, hyper, options, lod.images_per_batch,
                                      pool=pool)
                step_params(adam, grid, mlp, obj.grads, learning_rates(grid, mlp, hyper))
                line = format_log(step, li, it, obj, hyper)
                lines.append(line)
                if log is not None:
                    log(line)
                step += 1
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(grid, mlp, lines, step, time.perf_counter() - t0)


def step_params(adam: Adam, grid: SparseGrid, mlp: DecoderMlp, grads: dict, lr: dict) -> None:
    """One Adam update of every parameter, then re-smooth the SDF."""
    params = dict(grid.parameters())
    params.update(mlp.parameters())
    adam.step(params, grads, lr)
    grid.smooth()


def evaluate_views(grid: SparseGrid, mlp: DecoderMlp, dataset: Dataset, options: RenderOptions):
    """Masked PSNR of every view; returns ``(psnrs, renders)``."""
    psnrs, renders = [], []
    for cam, img, mask in zip(dataset.cameras, dataset.images, dataset.masks):
        rgb, acc = render_image(grid, mlp, cam, options)
        renders.append((rgb, acc))
        psnrs.append(psnr_masked(rgb, img, mask) if mask.any() else float("nan"))
    return psnrs, renders


def final_options(grid: SparseGrid, lod: LodConfig, max_samples: int = 512) -> RenderOptions:
    """Render settings matching the end of a LOD."""
    return RenderOptions(tau=lod.tau_at(max(lod.iterations - 1, 0)) / grid.voxel_size,
                         max_samples=max_samples, decode_eps=lod.decode_eps)
