"""Surface extraction and evaluation metrics (masked PSNR, two-way chamfer)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .grid import SparseGrid
from .losses import _central_gradient, _stencil_valid

PSNR_CAP = 99.0
DEGENERATE_AREA = 1e-12


@dataclass
class TriMesh:
    vertices: np.ndarray  # [V, 3]
    faces: np.ndarray  # [F, 3] int

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)


def empty_mesh() -> TriMesh:
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))


# ------------------------------------------------------------ extraction
def marching_cubes_dense(values, origin, spacing, level: float = 0.0) -> TriMesh:
    """Iso-surface of a dense node array; triangle normals face increasing values."""
    v = np.asarray(values, dtype=np.float64)
    if not (v.min() < level < v.max()):
        return empty_mesh()
    verts, faces, _, _ = measure.marching_cubes(v, level=level, spacing=(spacing,) * 3,
                                                gradient_direction="descent")
    mesh = TriMesh(verts + np.asarray(origin, dtype=np.float64), faces.astype(np.int64))
    keep = mesh.areas() > DEGENERATE_AREA
    return TriMesh(mesh.vertices, mesh.faces[keep])


def marching_cubes(grid: SparseGrid, field: str = "sdf") -> TriMesh:
    """Zero level set of the smoothed SDF (``field='sdf_raw'`` for the raw one)."""
    dense = grid.dense_sdf(field)
    origin = grid.bbox_min + 0.5 * grid.voxel_size
    return marching_cubes_dense(dense, origin, grid.voxel_size)


def sample_mesh(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform points on the surface."""
    if len(mesh) == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    a = mesh.areas()
    tri = rng.choice(len(a), size=n, p=a / a.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    t = mesh.triangles[tri]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


# ------------------------------------------------------------ distances
def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest points for paired rows of points and triangles (region tests)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), bool)

    def put(mask, val):
        m = mask & ~done
        out[m] = val[m] if val.ndim == 2 else val
        done[m] = True

    put((d1 <= 0) & (d2 <= 0), a)
    put((d3 >= 0) & (d4 <= d3), b)
    put((d6 >= 0) & (d5 <= d6), c)
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v_ab[:, None] * ab)
        w_ac = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w_ac[:, None] * ac)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w_bc[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        put(np.ones(len(p), bool), a + v[:, None] * ab + w[:, None] * ac)
    return out


def point_triangle_distance(p, tri) -> np.ndarray:
    """Distance between paired points ``[N,3]`` and triangles ``[N,3,3]``."""
    p = np.asarray(p, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64)
    q = closest_point_on_triangles(p, tri[:, 0], tri[:, 1], tri[:, 2])
    return np.linalg.norm(p - q, axis=1)


def brute_force_distance(points, mesh: TriMesh, block: int = 256) -> np.ndarray:
    """O(n m) scan, the reference for :class:`MeshDistance`."""
    points = np.asarray(points, dtype=np.float64)
    tri = mesh.triangles
    out = np.empty(len(points))
    for a in range(0, len(points), block):
        p = points[a:a + block]
        pp = np.repeat(p, len(tri), axis=0)
        tt = np.tile(tri, (len(p), 1, 1))
        out[a:a + block] = point_triangle_distance(pp, tt).reshape(len(p), len(tri)).min(axis=1)
    return out


class MeshDistance:
    """Exact point-to-mesh distance accelerated by a k-d tree on triangle centroids.

    A triangle lies entirely within ``radius`` of its centroid, so once a
    candidate distance ``d`` is known only centroids within ``d + radius``
    can hold a closer point; those are checked exhaustively.
    """

    def __init__(self, mesh: TriMesh, k: int = 16):
        if len(mesh) == 0:
            raise ValueError("mesh has no triangles")
        self.tri = mesh.triangles
        self.centroids = self.tri.mean(axis=1)
        self.radius = float(np.max(np.linalg.norm(self.tri - self.centroids[:, None], axis=2)))
        self.tree = cKDTree(self.centroids)
        self.k = min(k, len(self.tri))

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dc, ic = self.tree.query(p, k=self.k)
        dc = dc.reshape(len(p), -1)
        ic = ic.reshape(len(p), -1)
        d = point_triangle_distance(np.repeat(p, self.k, axis=0), self.tri[ic.reshape(-1)])
        best = d.reshape(len(p), self.k).min(axis=1)
        # rows where an unvisited centroid might still hide a closer triangle
        open_rows = np.nonzero((dc[:, -1] - self.radius < best) & (self.k < len(self.tri)))[0]
        for i in open_rows:
            cand = self.tree.query_ball_point(p[i], best[i] + self.radius)
            if cand:
                dd = point_triangle_distance(np.repeat(p[i:i + 1], len(cand), axis=0), self.tri[cand])
                best[i] = min(best[i], dd.min())
        return best


def mean_nn_spacing(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    d, _ = cKDTree(pts).query(pts, k=2)
    return float(d[:, 1].mean())


# ------------------------------------------------------------ metrics
def chamfer(pred, gt, max_dist: float | None = None, n_samples: int = 100_000, seed: int = 0) -> dict:
    """Two-way chamfer between a predicted mesh and a ground-truth mesh or cloud.

    Returns accuracy (pred -> gt), completeness (gt -> pred) and their mean,
    all in scene units times 1000. Distances above ``max_dist`` are ignored
    (default: ten times the mean ground-truth nearest-neighbor spacing).
    """
    if isinstance(pred, TriMesh):
        if len(pred) == 0:
            raise ValueError("predicted mesh is empty")
        pred_pts = sample_mesh(pred, n_samples, seed)
        to_pred = MeshDistance(pred)
    else:
        pred_pts = np.asarray(pred, dtype=np.float64)
        to_pred = _cloud_distance(pred_pts)
    if isinstance(gt, TriMesh):
        if len(gt) == 0:
            raise ValueError("ground-truth mesh is empty")
        gt_pts = sample_mesh(gt, n_samples, seed + 1)
        to_gt = MeshDistance(gt)
    else:
        gt_pts = np.asarray(gt, dtype=np.float64)
        to_gt = _cloud_distance(gt_pts)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        raise ValueError("chamfer needs non-empty inputs")
    if max_dist is None:
        max_dist = 10.0 * mean_nn_spacing(gt_pts)
    d_acc = to_gt(pred_pts)
    d_comp = to_pred(gt_pts)
    acc = _clipped_mean(d_acc, max_dist)
    comp = _clipped_mean(d_comp, max_dist)
    return {"accuracy": 1000.0 * acc, "completeness": 1000.0 * comp,
            "mean": 1000.0 * 0.5 * (acc + comp), "max_dist": float(max_dist),
            "accuracy_inliers": float(np.mean(d_acc <= max_dist)),
            "completeness_inliers": float(np.mean(d_comp <= max_dist))}


def _cloud_distance(points):
    tree = cKDTree(points)
    return lambda q: tree.query(np.asarray(q, dtype=np.float64))[0]


def _clipped_mean(d, max_dist) -> float:
    keep = d <= max_dist
    return float(d[keep].mean()) if keep.any() else float("nan")


def psnr_masked(img, gt, mask=None) -> float:
    """PSNR over the masked pixels of images in [0, 1]; capped at 99 dB."""
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape[:2], bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def eikonal_band_fraction(grid: SparseGrid, band_voxels: float = 2.0, lo: float = 0.85,
                          hi: float = 1.15) -> float:
    """Share of near-surface nodes whose central-difference gradient norm is in ``[lo, hi]``."""
    idx, _ = grid.pad_index(1)
    g = _central_gradient(grid.sdf_pad1(), grid.voxel_size)
    norm = np.linalg.norm(g, axis=-1)
    sel = _stencil_valid(idx >= 0) & (np.abs(grid.sdf) < band_voxels * grid.voxel_size)
    if not sel.any():
        return float("nan")
    return float(np.mean((norm[sel] >= lo) & (norm[sel] <= hi)))
