"""Sparse tiled SDF grid with per-tile tri-plane features and corner probes.

Layout conventions used throughout the package:

* nodes (voxels) sit at world ``bbox_min + (i + 0.5) * voxel_size``;
* a tile holds ``16^3`` nodes, tile ``t`` spans world
  ``[bbox_min + 16 t vs, bbox_min + 16 (t+1) vs)``;
* per-tile arrays are indexed ``[tile, x, y, z]``;
* plane 0 is ``F_x(y, z)``, plane 1 ``F_y(x, z)``, plane 2 ``F_z(x, y)``;
* probe corners are ordered by bits ``(x, y, z) = (c & 1, c >> 1 & 1, c >> 2 & 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .sh import check_order, raise_order, trilinear_weights

TILE = 16
CORNER_BITS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


def gaussian_kernel_1d(sigma: float = 1.0, radius: int = 2) -> np.ndarray:
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


KERNEL = gaussian_kernel_1d()


@dataclass
class SparseGrid:
    bbox_min: np.ndarray
    voxel_size: float
    resolution: tuple
    tile_coords: np.ndarray  # [T, 3]
    sdf_raw: np.ndarray  # [T, 16, 16, 16]
    planes: np.ndarray  # [T, 3, 16, 16, n_s]
    probe_coords: np.ndarray  # [P, 3] probe lattice coords
    probe_ids: np.ndarray  # [T, 8]
    probes: np.ndarray  # [P, l^2, n_a]
    fill_sign: np.ndarray  # [Tx, Ty, Tz] sign of unallocated cells
    lod: int = 0
    far_voxels: float = 4.0
    sdf: np.ndarray = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.resolution = tuple(int(r) for r in self.resolution)
        if any(r % TILE for r in self.resolution):
            raise ValueError(f"resolution {self.resolution} is not a multiple of {TILE}")
        self.tile_coords = np.asarray(self.tile_coords, dtype=np.int64).reshape(-1, 3)
        self.probe_ids = np.asarray(self.probe_ids, dtype=np.int64).reshape(-1, 8)
        self.probe_coords = np.asarray(self.probe_coords, dtype=np.int64).reshape(-1, 3)
        self.fill_sign = np.asarray(self.fill_sign, dtype=np.int8)
        self.rebuild()

    # ------------------------------------------------------------------ shape
    @property
    def n_tiles(self) -> int:
        return len(self.tile_coords)

    @property
    def n_s(self) -> int:
        return self.planes.shape[-1]

    @property
    def n_a(self) -> int:
        return self.probes.shape[-1]

    @property
    def order(self) -> int:
        return int(round(np.sqrt(self.probes.shape[1])))

    @property
    def tile_dims(self) -> tuple:
        return tuple(r // TILE for r in self.resolution)

    @property
    def far(self) -> float:
        return self.far_voxels * self.voxel_size

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.resolution, dtype=np.float64) * self.voxel_size

    @property
    def bbox_max(self) -> np.ndarray:
        return self.bbox_min + self.extent

    @property
    def dtype(self):
        return self.sdf_raw.dtype

    def parameters(self) -> dict:
        return {"sdf_raw": self.sdf_raw, "planes": self.planes, "probes": self.probes}

    def copy(self) -> "SparseGrid":
        return SparseGrid(
            bbox_min=self.bbox_min.copy(), voxel_size=self.voxel_size,
            resolution=self.resolution, tile_coords=self.tile_coords.copy(),
            sdf_raw=self.sdf_raw.copy(), planes=self.planes.copy(),
            probe_coords=self.probe_coords.copy(), probe_ids=self.probe_ids.copy(),
            probes=self.probes.copy(), fill_sign=self.fill_sign.copy(), lod=self.lod,
            far_voxels=self.far_voxels)

    def astype(self, dtype) -> "SparseGrid":
        g = self.copy()
        g.sdf_raw = g.sdf_raw.astype(dtype)
        g.planes = g.planes.astype(dtype)
        g.probes = g.probes.astype(dtype)
        g.rebuild()
        return g

    # ------------------------------------------------------------ topology
    def rebuild(self) -> None:
        """Recompute lookup tables and the smoothed SDF after any mutation."""
        dims = self.tile_dims
        lut = np.full(dims, -1, dtype=np.int64)
        if self.n_tiles:
            tc = self.tile_coords
            lut[tc[:, 0], tc[:, 1], tc[:, 2]] = np.arange(self.n_tiles)
        self.lut = lut
        if self.fill_sign.shape != dims:
            self.fill_sign = np.ones(dims, dtype=np.int8)
        self._cache = {}
        self.smooth()

    def pad_index(self, halo: int):
        """Flat node indices of each tile padded by ``halo`` on every side.

        Returns ``(idx, fill)`` with shape ``[T, 16+2h, 16+2h, 16+2h]``; ``idx``
        is ``-1`` where the node is unallocated and ``fill`` holds the
        far-field value to use there.
        """
        key = ("pad", halo)
        if key in self._cache:
            return self._cache[key]
        n = TILE + 2 * halo
        off = np.arange(-halo, TILE + halo)
        g = (self.tile_coords[:, None, None, None, :] * TILE
             + np.stack(np.meshgrid(off, off, off, indexing="ij"), axis=-1)[None])
        idx, fill = self.node_flat_index(g)
        idx = idx.reshape(self.n_tiles, n, n, n)
        fill = fill.reshape(self.n_tiles, n, n, n)
        self._cache[key] = (idx, fill)
        return idx, fill

    def extrap_index(self, halo: int):
        """Like :meth:`pad_index`, but unallocated halo nodes are linearly
        extrapolated from the tile itself: ``2 v[a] - v[b]`` with ``a`` the
        clamped node and ``b`` its mirror. Returns ``(a, b)``, ``b = -1``
        where the node is allocated."""
        key = ("extrap", halo)
        if key in self._cache:
            return self._cache[key]
        idx, _ = self.pad_index(halo)
        off = np.arange(-halo, TILE + halo)
        c = np.clip(off, 0, TILE - 1)
        mirror = 2 * c - off

        def flat(ax):
            i, j, k = np.meshgrid(ax, ax, ax, indexing="ij")
            return np.arange(self.n_tiles)[:, None, None, None] * TILE ** 3 + (i * TILE * TILE + j * TILE + k)[None]

        free = idx < 0
        a = np.where(free, flat(c), idx)
        b = np.where(free, flat(mirror), -1)
        self._cache[key] = (a, b)
        return a, b

    def padded(self, values, halo: int) -> np.ndarray:
        idx, fill = self.pad_index(halo)
        flat = np.asarray(values).reshape(-1)
        return np.where(idx >= 0, flat[np.maximum(idx, 0)], fill)

    def scatter_padded(self, grad_pad, halo: int) -> np.ndarray:
        """Adjoint of :meth:`padded`: accumulate ``grad_pad`` onto owned nodes."""
        idx, _ = self.pad_index(halo)
        m = idx >= 0
        out = np.bincount(idx[m], weights=grad_pad[m], minlength=self.n_tiles * TILE ** 3)
        return out.reshape(self.n_tiles, TILE, TILE, TILE)

    def padded_extrap(self, values, halo: int) -> np.ndarray:
        a, b = self.extrap_index(halo)
        flat = np.asarray(values).reshape(-1)
        return np.where(b >= 0, 2.0 * flat[a] - flat[np.maximum(b, 0)], flat[a])

    def scatter_extrap(self, grad_pad, halo: int) -> np.ndarray:
        """Adjoint of :meth:`padded_extrap`."""
        a, b = self.extrap_index(halo)
        ext = b >= 0
        g = np.asarray(grad_pad, dtype=np.float64)
        n = self.n_tiles * TILE ** 3
        out = np.bincount(a.reshape(-1), weights=np.where(ext, 2.0 * g, g).reshape(-1), minlength=n)
        out -= np.bincount(b[ext], weights=g[ext], minlength=n)
        return out.reshape(self.n_tiles, TILE, TILE, TILE)

    def node_flat_index(self, g):
        """Flat index into ``[T*4096]`` for global node coords ``g`` (or -1)."""
        g = np.asarray(g, dtype=np.int64)
        res = np.asarray(self.resolution)
        inb = np.all((g >= 0) & (g < res), axis=-1)
        t = np.clip(g // TILE, 0, np.asarray(self.tile_dims) - 1)
        tid = self.lut[t[..., 0], t[..., 1], t[..., 2]]
        tid = np.where(inb, tid, -1)
        loc = g % TILE
        flat = tid * TILE ** 3 + loc[..., 0] * TILE * TILE + loc[..., 1] * TILE + loc[..., 2]
        flat = np.where(tid >= 0, flat, -1)
        fill = np.where(inb, self.fill_sign[t[..., 0], t[..., 1], t[..., 2]] * self.far, self.far)
        return flat, fill

    # ----------------------------------------------------------- smoothing
    def smooth(self) -> np.ndarray:
        """Refresh ``s = G(s_raw)`` with a separable normalized 5^3 Gaussian.

        Unallocated or out-of-box halo nodes are linearly extrapolated from the
        tile, so constant and linear fields are fixed points.
        """
        if self.n_tiles == 0:
            self.sdf = np.zeros_like(self.sdf_raw)
        else:
            pad = self.padded_extrap(self.sdf_raw.astype(np.float64), 2)
            self.sdf = separable_filter(pad, KERNEL).astype(self.sdf_raw.dtype)
        self._cache.pop("sdf_pad1", None)
        return self.sdf

    def smooth_backward(self, grad_s) -> np.ndarray:
        """Gradient w.r.t. ``s_raw`` given a gradient w.r.t. ``s``."""
        if self.n_tiles == 0:
            return np.zeros_like(grad_s)
        gpad = separable_filter_adjoint(np.asarray(grad_s, dtype=np.float64), KERNEL)
        return self.scatter_extrap(gpad, 2)

    def sdf_pad1(self) -> np.ndarray:
        if "sdf_pad1" not in self._cache:
            self._cache["sdf_pad1"] = self.padded(self.sdf.astype(np.float64), 1)
        return self._cache["sdf_pad1"]

    # ------------------------------------------------------------ sampling
    def to_nodes(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.bbox_min) / self.voxel_size - 0.5

    def locate(self, p):
        """Tile index (-1 when unallocated), tile-local node coords, probe fractions."""
        p = np.asarray(p, dtype=np.float64)
        q = (p - self.bbox_min) / (self.voxel_size * TILE)
        t = np.floor(q).astype(np.int64)
        dims = np.asarray(self.tile_dims)
        inb = np.all((t >= 0) & (t < dims), axis=-1)
        tc = np.clip(t, 0, dims - 1)
        tid = np.where(inb, self.lut[tc[..., 0], tc[..., 1], tc[..., 2]], -1)
        frac = q - t
        local = frac * TILE - 0.5
        return tid, local, frac

    def trilinear_setup(self, p):
        """Corner indices into the halo-1 padded tiles and trilinear weights."""
        tid, local, _ = self.locate(p)
        n = TILE + 2
        base = np.floor(local).astype(np.int64)
        f = local - base
        b = base + 1
        flat = np.maximum(tid, 0) * n ** 3 + b[..., 0] * n * n + b[..., 1] * n + b[..., 2]
        offs = CORNER_BITS @ np.array([n * n, n, 1])
        idx = flat[..., None] + offs
        w = trilinear_weights(f)
        return tid, idx, w

    def sample_sdf(self, p, setup=None):
        """Trilinear sample of the smoothed SDF; returns ``(s, inside)``."""
        tid, idx, w = setup if setup is not None else self.trilinear_setup(p)
        vals = self.sdf_pad1().reshape(-1)
        s = np.sum(vals[idx] * w, axis=-1) if idx.size else np.zeros(tid.shape)
        inside = tid >= 0
        s = np.where(inside, s, self.far_value(p, tid))
        return s, inside

    def far_value(self, p, tid=None):
        p = np.asarray(p, dtype=np.float64)
        q = np.floor((p - self.bbox_min) / (self.voxel_size * TILE)).astype(np.int64)
        dims = np.asarray(self.tile_dims)
        inb = np.all((q >= 0) & (q < dims), axis=-1)
        qc = np.clip(q, 0, dims - 1)
        return np.where(inb, self.fill_sign[qc[..., 0], qc[..., 1], qc[..., 2]] * self.far, self.far)

    def sample_sdf_backward(self, grad_s, setup) -> np.ndarray:
        """Scatter sample gradients onto the padded SDF, returned as ``[T,18,18,18]``."""
        tid, idx, w = setup
        m = tid >= 0
        n = TILE + 2
        g = (np.asarray(grad_s)[m][:, None] * w[m]).reshape(-1)
        out = np.bincount(idx[m].reshape(-1), weights=g, minlength=self.n_tiles * n ** 3)
        return out.reshape(self.n_tiles, n, n, n)

    def compute_normal(self, p):
        """Normalized central-difference gradient of ``s`` (h = one voxel).

        Returns ``(n, grad_norm, degenerate)``; degenerate entries hold a zero
        vector and are meant to be replaced by the caller's fallback.
        """
        p = np.asarray(p, dtype=np.float64)
        g, _ = self.sdf_gradient(p)
        norm = np.sqrt(np.sum(g * g, axis=-1))
        deg = norm < 1e-8
        n = g / np.where(deg, 1.0, norm)[..., None]
        n[deg] = 0.0
        return n, norm, deg

    def sdf_gradient(self, p):
        h = self.voxel_size
        offs = np.concatenate([np.eye(3), -np.eye(3)]) * h
        pts = p[..., None, :] + offs
        setup = self.trilinear_setup(pts)
        s, _ = self.sample_sdf(pts, setup)
        g = (s[..., :3] - s[..., 3:]) / (2.0 * h)
        return g, setup

    # ------------------------------------------------------ spatial features
    def plane_setup(self, tid, local):
        """Bilinear lookups for the three planes of each point's tile."""
        lc = np.clip(local, 0.0, TILE - 1.0)
        i0 = np.minimum(np.floor(lc).astype(np.int64), TILE - 2)
        f = lc - i0
        t = np.maximum(tid, 0)
        axes = ((1, 2), (0, 2), (0, 1))
        idx = np.empty(tid.shape + (3, 4), dtype=np.int64)
        w = np.empty(tid.shape + (3, 4), dtype=np.float64)
        for k, (a, b) in enumerate(axes):
            base = ((t * 3 + k) * TILE + i0[..., a]) * TILE + i0[..., b]
            fa, fb = f[..., a], f[..., b]
            idx[..., k, 0] = base
            idx[..., k, 1] = base + 1
            idx[..., k, 2] = base + TILE
            idx[..., k, 3] = base + TILE + 1
            w[..., k, 0] = (1 - fa) * (1 - fb)
            w[..., k, 1] = (1 - fa) * fb
            w[..., k, 2] = fa * (1 - fb)
            w[..., k, 3] = fa * fb
        return idx, w

    def sample_planes(self, tid, local, setup=None):
        """Per-plane bilinear features ``[..., 3, n_s]``."""
        idx, w = setup if setup is not None else self.plane_setup(tid, local)
        flat = self.planes.reshape(-1, self.n_s).astype(np.float64, copy=False)
        return np.einsum("...kc,...kcs->...ks", w, flat[idx])

    def sample_spatial_features(self, tid, local):
        """``F_s = F_x * F_y * F_z`` channel-wise."""
        pf = self.sample_planes(tid, local)
        return pf[..., 0, :] * pf[..., 1, :] * pf[..., 2, :]

    def planes_backward(self, grad_pf, setup) -> np.ndarray:
        """Gradient w.r.t. ``planes`` given ``[N, 3, n_s]`` per-plane grads."""
        idx, w = setup
        flat_idx = idx.reshape(-1)
        out = np.empty((self.n_tiles * 3 * TILE * TILE, self.n_s))
        contrib = grad_pf[..., None, :] * w[..., None]  # [N,3,4,n_s]
        contrib = contrib.reshape(-1, self.n_s)
        for c in range(self.n_s):
            out[:, c] = np.bincount(flat_idx, weights=contrib[:, c], minlength=out.shape[0])
        return out.reshape(self.planes.shape)

    # ------------------------------------------------------- angular probes
    def probe_corner_weights(self, frac) -> np.ndarray:
        return trilinear_weights(np.asarray(frac, dtype=np.float64))

    def blended_probes(self, tid, weights) -> np.ndarray:
        """Per-point blended coefficient block ``[N, l^2, n_a]``."""
        nc, na = self.probes.shape[1:]
        out = np.zeros(tid.shape + (nc * na,))
        probes = self.probes.reshape(len(self.probes), -1).astype(np.float64, copy=False)
        for t, rows in _group_rows(tid):
            block = probes[self.probe_ids[t]]  # [8, nc*na]
            out[rows] = weights[rows] @ block
        return out.reshape(tid.shape + (nc, na))

    def blended_probes_backward(self, tid, weights, grad_blend) -> np.ndarray:
        nc, na = self.probes.shape[1:]
        g = grad_blend.reshape(len(tid), nc * na)
        out = np.zeros((len(self.probes), nc * na))
        for t, rows in _group_rows(tid):
            gb = weights[rows].T @ g[rows]  # [8, nc*na]
            np.add.at(out, self.probe_ids[t], gb)
        return out.reshape(self.probes.shape)

    # ----------------------------------------------------------- dense view
    def dense_sdf(self, field_name: str = "sdf") -> np.ndarray:
        """Full-resolution array of a node field, unallocated cells filled."""
        vals = getattr(self, field_name)
        tx, ty, tz = self.tile_dims
        fill = np.repeat(np.repeat(np.repeat(self.fill_sign.astype(np.float64) * self.far,
                                             TILE, 0), TILE, 1), TILE, 2)
        out = fill
        for i, (a, b, c) in enumerate(self.tile_coords):
            out[a * TILE:(a + 1) * TILE, b * TILE:(b + 1) * TILE, c * TILE:(c + 1) * TILE] = vals[i]
        return out

    def node_positions(self) -> np.ndarray:
        """World positions of every owned node, ``[T, 16, 16, 16, 3]``."""
        off = np.arange(TILE)
        loc = np.stack(np.meshgrid(off, off, off, indexing="ij"), axis=-1)
        g = self.tile_coords[:, None, None, None, :] * TILE + loc[None]
        return self.bbox_min + (g + 0.5) * self.voxel_size

    # ------------------------------------------------------------- schedule
    def set_order(self, order: int) -> None:
        """Raise the SH order; new bands start at zero."""
        check_order(order)
        if order == self.order:
            return
        if order < self.order:
            raise ValueError("sh order can only increase during training")
        self.probes = raise_order(self.probes, order)

    def param_counts(self) -> dict:
        """Per-tile parameter counts for the spatial planes and probe corners."""
        return {
            "spatial_per_tile": 3 * TILE * TILE * self.n_s,
            "probe_per_tile": 8 * self.probes.shape[1] * self.n_a,
        }


def _group_rows(tid):
    order = np.argsort(tid, kind="stable")
    sorted_t = tid[order]
    uniq, starts = np.unique(sorted_t, return_index=True)
    ends = np.append(starts[1:], len(sorted_t))
    for t, a, b in zip(uniq, starts, ends):
        if t < 0:
            continue
        yield int(t), order[a:b]


def separable_filter(pad, kernel) -> np.ndarray:
    """'valid' separable correlation over the last three axes."""
    r = len(kernel) // 2
    out = pad
    for ax in (1, 2, 3):
        n = out.shape[ax] - 2 * r
        acc = None
        for k, wk in enumerate(kernel):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(k, k + n)
            term = wk * out[tuple(sl)]
            acc = term if acc is None else acc + term
        out = acc
    return out


def separable_filter_adjoint(grad, kernel) -> np.ndarray:
    r = len(kernel) // 2
    out = grad
    for ax in (3, 2, 1):
        n = out.shape[ax]
        shape = list(out.shape)
        shape[ax] = n + 2 * r
        acc = np.zeros(shape)
        for k, wk in enumerate(kernel):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(k, k + n)
            acc[tuple(sl)] += wk * out
        out = acc
    return out


# ----------------------------------------------------------------- building
def build_probe_pool(tile_coords):
    corners = tile_coords[:, None, :] + CORNER_BITS[None]
    flat = corners.reshape(-1, 3)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    return uniq, inv.reshape(-1, 8)


def grid_from_dense(sdf_dense, bbox_min, voxel_size, n_s, n_a, order, band=6.0,
                    dtype=np.float32, plane_init=0.5, lod=0) -> SparseGrid:
    """Allocate tiles of a dense node array that lie within ``band`` voxels
    of the zero crossing and wrap them in a :class:`SparseGrid`."""
    check_order(order)
    sdf_dense = np.asarray(sdf_dense, dtype=np.float64)
    res = sdf_dense.shape
    dims = tuple(r // TILE for r in res)
    blocks = sdf_dense.reshape(dims[0], TILE, dims[1], TILE, dims[2], TILE).transpose(0, 2, 4, 1, 3, 5)
    bmin = blocks.min(axis=(3, 4, 5))
    bmax = blocks.max(axis=(3, 4, 5))
    near = np.abs(blocks).min(axis=(3, 4, 5)) <= band * voxel_size
    keep = near | ((bmin <= 0) & (bmax >= 0))
    fill = np.where(blocks.mean(axis=(3, 4, 5)) < 0, -1, 1).astype(np.int8)
    tc = np.argwhere(keep)
    sdf_raw = blocks[keep].astype(dtype)
    planes = np.full((len(tc), 3, TILE, TILE, n_s), plane_init, dtype=dtype)
    pc, pid = build_probe_pool(tc) if len(tc) else (np.zeros((0, 3), np.int64), np.zeros((0, 8), np.int64))
    probes = np.zeros((len(pc), order * order, n_a), dtype=dtype)
    return SparseGrid(bbox_min=np.asarray(bbox_min, dtype=np.float64), voxel_size=float(voxel_size),
                      resolution=res, tile_coords=tc, sdf_raw=sdf_raw, planes=planes,
                      probe_coords=pc, probe_ids=pid, probes=probes, fill_sign=fill, lod=lod)


def dense_node_positions(bbox_min, voxel_size, res) -> np.ndarray:
    axes = [np.asarray(bbox_min)[k] + (np.arange(res[k]) + 0.5) * voxel_size for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def init_sphere(bbox_min, extent, resolution, center, radius, n_s=4, n_a=4, order=2,
                band=6.0, dtype=np.float32, lod=0) -> SparseGrid:
    res = _as_res(resolution)
    vs = float(extent) / res[0]
    p = dense_node_positions(bbox_min, vs, res)
    sdf = np.linalg.norm(p - np.asarray(center, dtype=np.float64), axis=-1) - radius
    return grid_from_dense(sdf, bbox_min, vs, n_s, n_a, order, band=band, dtype=dtype, lod=lod)


def visual_hull_sdf(cameras, masks, bbox_min, voxel_size, res) -> np.ndarray:
    """Signed distance (world units) to the silhouette-carved occupancy."""
    if not masks or len(masks) != len(cameras):
        raise ValueError("visual hull initialization needs one mask per camera")
    p = dense_node_positions(bbox_min, voxel_size, res).reshape(-1, 3)
    occ = np.ones(len(p), dtype=bool)
    for cam, mask in zip(cameras, masks):
        uv, depth = cam.project(p)
        u = np.floor(uv[:, 0]).astype(np.int64)
        v = np.floor(uv[:, 1]).astype(np.int64)
        h, w = mask.shape[:2]
        ok = (depth > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        hit = np.zeros(len(p), dtype=bool)
        hit[ok] = np.asarray(mask)[v[ok], u[ok]] > 0
        occ &= hit
    occ = occ.reshape(res)
    d_out = ndimage.distance_transform_edt(~occ)
    d_in = ndimage.distance_transform_edt(occ)
    return np.where(occ, -(d_in - 0.5), d_out - 0.5) * voxel_size


def init_visual_hull(cameras, masks, bbox_min, extent, resolution, n_s=4, n_a=4, order=2,
                     band=6.0, dtype=np.float32, lod=0) -> SparseGrid:
    res = _as_res(resolution)
    vs = float(extent) / res[0]
    sdf = visual_hull_sdf(cameras, masks, bbox_min, vs, res)
    return grid_from_dense(sdf, bbox_min, vs, n_s, n_a, order, band=band, dtype=dtype, lod=lod)


def _as_res(resolution):
    if np.isscalar(resolution):
        return (int(resolution),) * 3
    return tuple(int(r) for r in resolution)


# ------------------------------------------------------------- subdivision
def subdivide(grid: SparseGrid, band: float = 6.0) -> SparseGrid:
    """Halve the voxel size; children of every tile inherit upsampled values.

    Child tiles farther than ``band`` new voxels from the zero crossing (and
    without a sign change) are dropped.
    """
    vs = grid.voxel_size / 2.0
    res = tuple(2 * r for r in grid.resolution)
    child_off = CORNER_BITS
    tc_child = (grid.tile_coords[:, None, :] * 2 + child_off[None]).reshape(-1, 3)
    parent = np.repeat(np.arange(grid.n_tiles), 8)

    off = np.arange(TILE)
    loc = np.stack(np.meshgrid(off, off, off, indexing="ij"), axis=-1).reshape(-1, 3)
    g = tc_child[:, None, :] * TILE + loc[None]
    p = grid.bbox_min + (g + 0.5) * vs
    # raw SDF upsampled from the parent's raw field (halo read across tiles)
    raw = grid.sdf_raw.astype(np.float64)
    # unallocated neighbors: extrapolate the tile instead of using the far fill
    raw_pad = grid.padded_extrap(raw, 1)
    tid, idx, w = grid.trilinear_setup(p.reshape(-1, 3))
    vals = np.sum(raw_pad.reshape(-1)[idx] * w, axis=-1)
    vals = np.where(tid >= 0, vals, grid.far_value(p.reshape(-1, 3)))
    sdf_child = vals.reshape(-1, TILE, TILE, TILE)

    # planes: child-local texel -> parent-local coordinate
    n_s = grid.n_s
    planes = np.empty((len(tc_child), 3, TILE, TILE, n_s))
    lc = (np.arange(TILE)[None, :] + TILE * child_off[:, :, None]) / 2.0 - 0.25  # [8, 3, 16]
    lc = np.clip(lc, 0.0, TILE - 1.0)
    axes = ((1, 2), (0, 2), (0, 1))
    for ci in range(8):
        for k, (a, b) in enumerate(axes):
            src = grid.planes[:, k].astype(np.float64)  # [T,16,16,n_s]
            planes[ci::8, k] = _bilinear_resample(src, lc[ci, a], lc[ci, b])

    # prune by distance to the zero crossing
    smin = sdf_child.reshape(len(tc_child), -1).min(axis=1)
    smax = sdf_child.reshape(len(tc_child), -1).max(axis=1)
    amin = np.abs(sdf_child).reshape(len(tc_child), -1).min(axis=1)
    keep = (amin <= band * vs) | ((smin <= 0) & (smax >= 0))
    fill = np.repeat(np.repeat(np.repeat(grid.fill_sign, 2, 0), 2, 1), 2, 2)
    for t in np.nonzero(~keep)[0]:
        a, b, c = tc_child[t]
        fill[a, b, c] = -1 if sdf_child[t].mean() < 0 else 1

    tc_new = tc_child[keep]
    parent = parent[keep]
    pc, pid = build_probe_pool(tc_new)
    # probe lattice coords halve back into the old lattice
    old_q = pc / 2.0
    owner_child = np.empty(len(pc), dtype=np.int64)
    owner_child[pid.reshape(-1)] = np.repeat(np.arange(len(tc_new)), 8)
    owner = parent[owner_child]
    frac = old_q - grid.tile_coords[owner]
    wts = trilinear_weights(frac)
    old = grid.probes.astype(np.float64)[grid.probe_ids[owner]]  # [P,8,nc,na]
    probes = np.einsum("pi,pijk->pjk", wts, old)

    dtype = grid.dtype
    out = SparseGrid(bbox_min=grid.bbox_min.copy(), voxel_size=vs, resolution=res,
                     tile_coords=tc_new, sdf_raw=sdf_child[keep].astype(dtype),
                     planes=planes[keep].astype(dtype), probe_coords=pc, probe_ids=pid,
                     probes=probes.astype(dtype), fill_sign=fill, lod=grid.lod - 1,
                     far_voxels=grid.far_voxels)
    return out


def _bilinear_resample(src, ca, cb):
    """Sample ``src[T, 16, 16, n]`` at separable coordinates ``ca`` x ``cb``."""
    ia = np.minimum(np.floor(ca).astype(np.int64), TILE - 2)
    ib = np.minimum(np.floor(cb).astype(np.int64), TILE - 2)
    fa = (ca - ia)[None, :, None, None]
    fb = (cb - ib)[None, None, :, None]
    s00 = src[:, ia][:, :, ib]
    s01 = src[:, ia][:, :, ib + 1]
    s10 = src[:, ia + 1][:, :, ib]
    s11 = src[:, ia + 1][:, :, ib + 1]
    return (1 - fa) * ((1 - fb) * s00 + fb * s01) + fa * ((1 - fb) * s10 + fb * s11)


def sdf_slice_image(grid: SparseGrid, axis: int = 2, index: int | None = None) -> np.ndarray:
    """8-bit grayscale slice of the smoothed SDF for debugging dumps."""
    dense = grid.dense_sdf()
    if index is None:
        index = dense.shape[axis] // 2
    sl = np.take(dense, index, axis=axis)
    scale = max(grid.far, 1e-12)
    img = np.clip(0.5 + 0.5 * sl / scale, 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8)
