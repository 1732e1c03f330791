"""Differentiable volume rendering of the sparse SDF grid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderMlp, ViewSwitches, decode_fused, decode_fused_backward
from .grid import TILE, SparseGrid

EARLY_STOP_T = 1e-4


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    ``pose`` is the 3x4 world-from-camera matrix ``[R | t]``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray
    camera_id: int = 0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    def validate(self, tol: float = 1e-6) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.pose[:, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1.0) > tol:
            raise ValueError(f"camera {self.camera_id}: pose rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:, 3].copy()

    def rays(self, pixels=None):
        """World origins and unit directions through pixel centers (row-major)."""
        if pixels is None:
            v, u = np.mgrid[0:self.height, 0:self.width]
            u, v = u.reshape(-1), v.reshape(-1)
        else:
            u, v = pixels
        d = np.stack([(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy,
                      np.ones(len(u))], axis=-1)
        d = d @ self.pose[:, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.pose[:, 3], d.shape).copy()
        return o, d

    def project(self, p):
        """Pixel coordinates (continuous, pixel centers at +0.5) and depth."""
        R, t = self.pose[:, :3], self.pose[:, 3]
        pc = (np.asarray(p, dtype=np.float64) - t) @ R
        z = pc[..., 2]
        zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
        uv = np.stack([self.fx * pc[..., 0] / zs + self.cx, self.fy * pc[..., 1] / zs + self.cy], axis=-1)
        return uv, z

    def scaled(self, divisor: int) -> "Camera":
        if divisor == 1:
            return self
        return Camera(self.fx / divisor, self.fy / divisor, self.cx / divisor, self.cy / divisor,
                      self.width // divisor, self.height // divisor, self.pose.copy(), self.camera_id)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose with +z toward ``target`` and +y roughly down."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    upv = np.asarray(up, dtype=np.float64)
    if abs(np.dot(f, upv)) > 0.999:
        upv = np.array([0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(f, upv)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return np.concatenate([np.stack([x, y, f], axis=1), eye[:, None]], axis=1)


# ------------------------------------------------------------------ opacity
def log_phi(s, tau):
    """log of the logistic ``Phi_tau(s) = 1 / (1 + exp(-tau s))``."""
    return -np.logaddexp(0.0, -tau * np.asarray(s, dtype=np.float64))


def alpha_from_sdf(s, s_next, tau):
    """NeuS opacity ``max((Phi(s) - Phi(s_next)) / Phi(s), 0)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = log_phi(s_next, tau) - log_phi(s, tau)
    return np.where(q < 0.0, -np.expm1(np.minimum(q, 0.0)), 0.0)


def alpha_grads(s, s_next, alpha, tau):
    """d alpha / d s and d alpha / d s_next."""
    active = alpha > 0.0
    one_m = 1.0 - alpha
    ds = one_m * tau * _sigmoid(-tau * s)
    dn = -one_m * tau * _sigmoid(-tau * s_next)
    return np.where(active, ds, 0.0), np.where(active, dn, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def transmittance(alpha) -> np.ndarray:
    """``T_i = prod_{j<i} (1 - alpha_j)`` along the last axis."""
    a = np.asarray(alpha, dtype=np.float64)
    T = np.ones_like(a)
    if a.shape[-1] > 1:
        T[..., 1:] = np.cumprod(1.0 - a[..., :-1], axis=-1)
    return T


def composite(alpha, colors):
    """Front-to-back compositing; returns ``(rgb, accumulated_alpha, weights)``."""
    a = np.asarray(alpha, dtype=np.float64)
    w = transmittance(a) * a
    rgb = np.einsum("...i,...ic->...c", w, np.asarray(colors, dtype=np.float64))
    return rgb, w.sum(axis=-1), w


def composite_backward(alpha, weights, colors, grad_rgb, grad_acc, background=None):
    """Gradients w.r.t. alpha and colors of ``rgb + (1 - A) * bg``.

    Uses the backward recursion ``U_i = g_{i+1} a_{i+1} + (1 - a_{i+1}) U_{i+1}``
    so fully opaque samples need no division.
    """
    a = np.asarray(alpha, dtype=np.float64)
    c = np.asarray(colors, dtype=np.float64)
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    gw = np.einsum("...c,...ic->...i", grad_rgb, c - bg) + np.asarray(grad_acc)[..., None]
    T = transmittance(a)
    U = np.zeros_like(a)
    for i in range(a.shape[-1] - 2, -1, -1):
        U[..., i] = gw[..., i + 1] * a[..., i + 1] + (1.0 - a[..., i + 1]) * U[..., i + 1]
    g_alpha = T * (gw - U)
    g_colors = weights[..., None] * grad_rgb[..., None, :]
    return g_alpha, g_colors


# ------------------------------------------------------------------ marching
def ray_box(o, d, lo, hi):
    inv = 1.0 / np.where(np.abs(d) < 1e-15, np.where(d < 0, -1e-15, 1e-15), d)
    t0 = (lo - o) * inv
    t1 = (hi - o) * inv
    tmin = np.max(np.minimum(t0, t1), axis=-1)
    tmax = np.min(np.maximum(t0, t1), axis=-1)
    return np.maximum(tmin, 0.0), tmax


def _tile_segments(grid: SparseGrid, o, d, t_in, t_out):
    """Tile-level DDA; returns ``(ray, t_enter, t_exit)`` of allocated cells."""
    tsize = grid.voxel_size * TILE
    dims = np.asarray(grid.tile_dims)
    rays = np.nonzero(t_out > t_in)[0]
    if len(rays) == 0:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
    oo, dd = o[rays], d[rays]
    tcur = t_in[rays].copy()
    tend = t_out[rays]
    tmid = np.minimum(tcur + 1e-9 * tsize, 0.5 * (tcur + tend))
    cell = np.floor((oo + tmid[:, None] * dd - grid.bbox_min) / tsize).astype(np.int64)
    cell = np.clip(cell, 0, dims - 1)
    step = np.where(dd >= 0, 1, -1)
    safe = np.where(np.abs(dd) < 1e-15, 1e-15, np.abs(dd))
    nxt = grid.bbox_min + (cell + (step > 0)) * tsize
    tmax = np.where(np.abs(dd) < 1e-15, np.inf, (nxt - oo) / np.where(dd == 0, 1e-15, dd))
    tdelta = np.where(np.abs(dd) < 1e-15, np.inf, tsize / safe)
    seg_r, seg_a, seg_b = [], [], []
    active = np.arange(len(rays))
    for _ in range(int(dims.sum()) + 3):
        if len(active) == 0:
            break
        c = cell[active]
        tm = tmax[active]
        axis = np.argmin(tm, axis=1)
        texit = np.minimum(tm[np.arange(len(active)), axis], tend[active])
        tid = grid.lut[c[:, 0], c[:, 1], c[:, 2]]
        ok = (tid >= 0) & (texit > tcur[active])
        seg_r.append(rays[active[ok]])
        seg_a.append(tcur[active[ok]])
        seg_b.append(texit[ok])
        tcur[active] = texit
        cell[active, axis] += step[active, axis]
        tmax[active, axis] += tdelta[active, axis]
        inside = np.all((cell[active] >= 0) & (cell[active] < dims), axis=1) & (texit < tend[active])
        active = active[inside]
    return np.concatenate(seg_r), np.concatenate(seg_a), np.concatenate(seg_b)


@dataclass
class RaySamples:
    """Padded per-ray samples (``[R, K]``) for the rays that hit the grid."""

    ray_index: np.ndarray  # [R] indices into the input rays
    k: np.ndarray  # [R, K] global step index along the ray
    t: np.ndarray  # [R, K]
    valid: np.ndarray  # [R, K]
    t0: np.ndarray  # [R] grid entry distance
    step: float

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def march_rays(grid: SparseGrid, o, d, max_samples: int = 512) -> RaySamples:
    """Samples spaced one voxel apart, only inside allocated tiles."""
    o = np.asarray(o, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    dt = grid.voxel_size
    empty = RaySamples(np.zeros(0, np.int64), np.zeros((0, 0), np.int64), np.zeros((0, 0)),
                       np.zeros((0, 0), bool), np.zeros(0), dt)
    if grid.n_tiles == 0 or len(o) == 0:
        return empty
    t_in, t_out = ray_box(o, d, grid.bbox_min, grid.bbox_max)
    sr, sa, sb = _tile_segments(grid, o, d, t_in, t_out)
    k0 = np.ceil((sa - t_in[sr]) / dt - 0.5).astype(np.int64)
    k1 = np.ceil((sb - t_in[sr]) / dt - 0.5).astype(np.int64)
    n = np.maximum(k1 - k0, 0)
    if n.sum() == 0:
        return empty
    total = int(n.sum())
    starts = np.cumsum(n) - n
    fr = np.repeat(sr, n)
    fk = np.repeat(k0, n) + (np.arange(total) - np.repeat(starts, n))
    order = np.lexsort((fk, fr))
    fr, fk = fr[order], fk[order]
    t = t_in[fr] + (fk + 0.5) * dt
    tid, _, _ = grid.locate(o[fr] + t[:, None] * d[fr])
    keep = tid >= 0
    fr, fk, t = fr[keep], fk[keep], t[keep]
    if len(fr) == 0:
        return empty
    uniq, first, counts = np.unique(fr, return_index=True, return_counts=True)
    row = np.searchsorted(uniq, fr)
    col = np.arange(len(fr)) - first[row]
    cap = col < max_samples
    row, col, fk, t = row[cap], col[cap], fk[cap], t[cap]
    K = int(col.max()) + 1
    R = len(uniq)
    kk = np.zeros((R, K), np.int64)
    tt = np.zeros((R, K))
    vv = np.zeros((R, K), bool)
    kk[row, col] = fk
    tt[row, col] = t
    vv[row, col] = True
    return RaySamples(uniq, kk, tt, vv, t_in[uniq], dt)


# ---------------------------------------------------------------- rendering
@dataclass
class RenderOptions:
    tau: float = 1000.0
    background: tuple = (0.0, 0.0, 0.0)
    max_samples: int = 512
    chunk: int = 4096
    decode_eps: float = 0.0
    switches: ViewSwitches = field(default_factory=ViewSwitches)


@dataclass
class ChunkCache:
    n_rays: int
    samples: RaySamples
    alpha: np.ndarray
    weights: np.ndarray
    colors: np.ndarray
    s: np.ndarray
    s_next: np.ndarray
    live: np.ndarray
    setup: tuple
    next_setup: tuple
    next_from: np.ndarray  # [R, K] column of the next sample, or -1
    extra_pos: tuple  # (rows, cols) of samples needing an explicit next lookup
    decode_rows: tuple
    decode_cache: object
    camera_id: object


def render_rays(grid: SparseGrid, mlp: DecoderMlp, o, d, options: RenderOptions,
                camera_id=None, keep_cache: bool = False):
    """Render a batch of rays; returns ``(rgb [N,3], acc [N], cache)``."""
    o = np.asarray(o, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    N = len(o)
    bg = np.asarray(options.background, dtype=np.float64)
    rgb = np.broadcast_to(bg, (N, 3)).copy()
    acc = np.zeros(N)
    smp = march_rays(grid, o, d, options.max_samples)
    if len(smp.ray_index) == 0:
        return rgb, acc, (ChunkCache(N, smp, *([None] * 13)) if keep_cache else None)

    ri = smp.ray_index
    R, K = smp.k.shape
    pos = o[ri][:, None, :] + smp.t[..., None] * d[ri][:, None, :]
    setup = grid.trilinear_setup(pos[smp.valid])
    s = np.zeros((R, K))
    s[smp.valid], _ = grid.sample_sdf(pos[smp.valid], setup)

    # s at the following step: reuse the next column when it is the next step
    nxt_ok = np.zeros((R, K), bool)
    nxt_ok[:, :-1] = smp.valid[:, 1:] & (smp.k[:, 1:] == smp.k[:, :-1] + 1)
    s_next = np.zeros((R, K))
    s_next[:, :-1] = np.where(nxt_ok[:, :-1], s[:, 1:], 0.0)
    need = smp.valid & ~nxt_ok
    er, ec = np.nonzero(need)
    epos = o[ri[er]] + (smp.t[er, ec] + smp.step)[:, None] * d[ri[er]]
    next_setup = grid.trilinear_setup(epos)
    s_next[er, ec], _ = grid.sample_sdf(epos, next_setup)

    alpha = np.where(smp.valid, alpha_from_sdf(s, s_next, options.tau), 0.0)
    T = transmittance(alpha)
    live = smp.valid & (T >= EARLY_STOP_T)
    alpha = np.where(live, alpha, 0.0)
    weights = T * alpha

    colors = np.zeros((R, K, 3))
    dmask = live & (weights > options.decode_eps) if options.decode_eps > 0 else live
    dr, dc = np.nonzero(dmask)
    dcache = None
    if len(dr):
        view = -d[ri[dr]]
        cam = camera_id
        col, dcache = decode_fused(grid, mlp, pos[dr, dc], view, cam, options.switches, keep_cache)
        colors[dr, dc] = col
    crgb, cacc, _ = composite(alpha, colors)
    rgb[ri] = crgb + (1.0 - cacc)[:, None] * bg
    acc[ri] = cacc
    cache = None
    if keep_cache:
        cache = ChunkCache(N, smp, alpha, weights, colors, s, s_next, live, setup, next_setup,
                           nxt_ok, (er, ec), (dr, dc), dcache, camera_id)
    return rgb, acc, cache


def new_grads(grid: SparseGrid, mlp: DecoderMlp) -> dict:
    g = {"sdf_pad1": np.zeros((grid.n_tiles,) + (TILE + 2,) * 3),
         "planes": np.zeros(grid.planes.shape), "probes": np.zeros(grid.probes.shape)}
    for k, v in mlp.parameters().items():
        g[k] = np.zeros(v.shape)
    return g


def render_rays_backward(grid: SparseGrid, mlp: DecoderMlp, cache: ChunkCache, grad_rgb,
                         grad_acc, options: RenderOptions, grads: dict) -> None:
    """Accumulate gradients of a :func:`render_rays` call into ``grads``."""
    smp = cache.samples
    if len(smp.ray_index) == 0:
        return
    ri = smp.ray_index
    bg = np.asarray(options.background, dtype=np.float64)
    g_rgb = np.asarray(grad_rgb, dtype=np.float64).reshape(-1, 3)[ri]
    g_acc = np.asarray(grad_acc, dtype=np.float64).reshape(-1)[ri]
    g_alpha, g_col = composite_backward(cache.alpha, cache.weights, cache.colors, g_rgb, g_acc, bg)

    dr, dc = cache.decode_rows
    if len(dr):
        decode_fused_backward(grid, mlp, cache.decode_cache, g_col[dr, dc], grads)

    g_alpha = np.where(cache.live, g_alpha, 0.0)
    da_ds, da_dn = alpha_grads(cache.s, cache.s_next, cache.alpha, options.tau)
    gs = g_alpha * da_ds
    gn = g_alpha * da_dn
    # the next-sample value was either read from the following column or looked up
    gs[:, 1:] += np.where(cache.next_from[:, :-1], gn[:, :-1], 0.0)
    er, ec = cache.extra_pos
    grads["sdf_pad1"] += grid.sample_sdf_backward(gs[smp.valid], cache.setup)
    grads["sdf_pad1"] += grid.sample_sdf_backward(gn[er, ec], cache.next_setup)


def _chunks(n, size):
    for a in range(0, n, size):
        yield a, min(n, a + size)


def render_image(grid: SparseGrid, mlp: DecoderMlp, camera: Camera, options: RenderOptions | None = None):
    """Render an image; returns ``(rgb [H,W,3], alpha [H,W])``."""
    options = options or RenderOptions()
    o, d = camera.rays()
    rgb = np.empty((len(o), 3))
    acc = np.empty(len(o))
    cam_id = camera.camera_id if mlp.camera_bias is not None else None
    for a, b in _chunks(len(o), options.chunk):
        rgb[a:b], acc[a:b], _ = render_rays(grid, mlp, o[a:b], d[a:b], options, cam_id)
    return rgb.reshape(camera.height, camera.width, 3), acc.reshape(camera.height, camera.width)


@dataclass
class ImageRender:
    rgb: np.ndarray
    alpha: np.ndarray
    caches: list


def render_image_with_cache(grid, mlp, camera, options=None) -> ImageRender:
    options = options or RenderOptions()
    o, d = camera.rays()
    rgb = np.empty((len(o), 3))
    acc = np.empty(len(o))
    caches = []
    cam_id = camera.camera_id if mlp.camera_bias is not None else None
    for a, b in _chunks(len(o), options.chunk):
        rgb[a:b], acc[a:b], c = render_rays(grid, mlp, o[a:b], d[a:b], options, cam_id, keep_cache=True)
        caches.append((a, b, c))
    return ImageRender(rgb.reshape(camera.height, camera.width, 3),
                       acc.reshape(camera.height, camera.width), caches)


def render_backward(grid, mlp, result: ImageRender, grad_rgb, grad_alpha, options=None) -> dict:
    """Gradients of an image render given upstream pixel/alpha gradients.

    Returned SDF gradients are w.r.t. the smoothed SDF ``s`` (``'sdf'``) and
    the raw SDF through the Gaussian (``'sdf_raw'``).
    """
    options = options or RenderOptions()
    grads = new_grads(grid, mlp)
    g_rgb = np.asarray(grad_rgb, dtype=np.float64).reshape(-1, 3)
    g_a = np.asarray(grad_alpha, dtype=np.float64).reshape(-1)
    for a, b, cache in result.caches:
        render_rays_backward(grid, mlp, cache, g_rgb[a:b], g_a[a:b], options, grads)
    finalize_sdf_grads(grid, grads)
    return grads


def finalize_sdf_grads(grid: SparseGrid, grads: dict) -> None:
    """Fold padded SDF gradients back onto owned nodes and through the Gaussian."""
    pad = grads.pop("sdf_pad1")
    g_s = grid.scatter_padded(pad, 1)
    grads["sdf"] = grads.get("sdf", 0.0) + g_s
    grads["sdf_raw"] = grads.get("sdf_raw", 0.0) + grid.smooth_backward(g_s)
