"""Photometric loss and grid regularizers with their reweighted gradients.

Each loss returns a :class:`LossTerm`. ``value`` is the plain loss. The
returned gradients are those of ``surrogate``, i.e. the loss with the
per-element reweighting factors held constant; passing ``weights`` back in
freezes them, which is what finite-difference audits rely on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import SparseGrid

PHOTO_EPS = 1e-3
FEATURE_EPS = 0.05
PROXIMITY_SCALE = 5.0


@dataclass
class LossTerm:
    value: float
    surrogate: float
    grads: dict = field(default_factory=dict)
    weights: object = None


def proximity_weighting(s) -> np.ndarray:
    """``(1 + 5 |s|)^-1`` applied to per-voxel regularizer gradients."""
    return 1.0 / (1.0 + PROXIMITY_SCALE * np.abs(np.asarray(s, dtype=np.float64)))


# ---------------------------------------------------------------- photometric
def loss_photo(rendered, gt, mask, acc=None, eps: float = PHOTO_EPS, images_per_batch: int = 1,
               weights=None) -> LossTerm:
    """Squared color error inside ``mask`` and squared opacity outside it.

    The gradient of every pixel is scaled by ``(max(c, c_gt) + eps)^-1``
    (``(A + eps)^-1`` for the opacity term) so relative errors count.
    """
    c = np.asarray(rendered, dtype=np.float64)
    cg = np.asarray(gt, dtype=np.float64)
    if c.shape != cg.shape:
        raise ValueError(f"rendered {c.shape} and ground truth {cg.shape} differ in shape")
    m = np.asarray(mask, dtype=bool)
    if m.shape != c.shape[:-1]:
        raise ValueError(f"mask {m.shape} does not match image {c.shape[:-1]}")
    A = np.zeros(m.shape) if acc is None else np.asarray(acc, dtype=np.float64)
    diff = (c - cg) * m[..., None]
    out = np.where(m, 0.0, A)
    if weights is None:
        wc = 1.0 / (np.maximum(c, cg) + eps)
        wa = 1.0 / (np.maximum(A, 0.0) + eps)
    else:
        wc, wa = weights
    scale = 1.0 / images_per_batch
    value = scale * (np.sum(diff * diff) + (np.sum(out * out) if acc is not None else 0.0))
    surrogate = scale * (np.sum(wc * diff * diff) + (np.sum(wa * out * out) if acc is not None else 0.0))
    grads = {"rgb": scale * 2.0 * wc * diff, "acc": scale * 2.0 * wa * out}
    return LossTerm(value, surrogate, grads, (wc, wa))


# ---------------------------------------------------------------- sdf terms
def loss_sdf(grid: SparseGrid, weights=None, proximity: bool = True) -> LossTerm:
    """``sum |s - s_raw|^2`` with relative and proximity reweighting.

    Gradients: ``'sdf'`` w.r.t. the smoothed field (to be pulled through the
    Gaussian by the caller) and ``'sdf_raw'`` for the direct dependency.
    """
    s = grid.sdf.astype(np.float64)
    raw = grid.sdf_raw.astype(np.float64)
    d = s - raw
    if weights is None:
        vs = grid.voxel_size
        weights = 1.0 / (np.maximum(np.abs(s), np.abs(raw)) / vs + 1.0)
        if proximity:
            weights = weights * proximity_weighting(s)
    value = float(np.sum(d * d))
    surrogate = float(np.sum(weights * d * d))
    g = 2.0 * weights * d
    return LossTerm(value, surrogate, {"sdf": g, "sdf_raw": -g}, weights)


def _central_gradient(pad, vs):
    """Central differences on the interior of a padded block (shrinks by 2)."""
    gx = (pad[:, 2:, 1:-1, 1:-1] - pad[:, :-2, 1:-1, 1:-1]) / (2.0 * vs)
    gy = (pad[:, 1:-1, 2:, 1:-1] - pad[:, 1:-1, :-2, 1:-1]) / (2.0 * vs)
    gz = (pad[:, 1:-1, 1:-1, 2:] - pad[:, 1:-1, 1:-1, :-2]) / (2.0 * vs)
    return np.stack([gx, gy, gz], axis=-1)


def _central_gradient_adjoint(g, vs, shape):
    out = np.zeros(shape)
    h = 1.0 / (2.0 * vs)
    out[:, 2:, 1:-1, 1:-1] += h * g[..., 0]
    out[:, :-2, 1:-1, 1:-1] -= h * g[..., 0]
    out[:, 1:-1, 2:, 1:-1] += h * g[..., 1]
    out[:, 1:-1, :-2, 1:-1] -= h * g[..., 1]
    out[:, 1:-1, 1:-1, 2:] += h * g[..., 2]
    out[:, 1:-1, 1:-1, :-2] -= h * g[..., 2]
    return out


def _stencil_valid(valid_pad):
    """Nodes whose 6-neighborhood (and themselves) are allocated."""
    v = valid_pad
    c = v[:, 1:-1, 1:-1, 1:-1]
    return (c & v[:, 2:, 1:-1, 1:-1] & v[:, :-2, 1:-1, 1:-1] & v[:, 1:-1, 2:, 1:-1]
            & v[:, 1:-1, :-2, 1:-1] & v[:, 1:-1, 1:-1, 2:] & v[:, 1:-1, 1:-1, :-2])


def loss_eikonal(grid: SparseGrid, weights=None, proximity: bool = True) -> LossTerm:
    """``sum (||grad s|| - 1)^2`` over nodes with a full central stencil."""
    vs = grid.voxel_size
    idx, _ = grid.pad_index(1)
    pad = grid.sdf_pad1()
    grad = _central_gradient(pad, vs)
    valid = _stencil_valid(idx >= 0)
    norm = np.sqrt(np.sum(grad * grad, axis=-1))
    r = np.where(valid, norm - 1.0, 0.0)
    if weights is None:
        weights = valid * (proximity_weighting(grid.sdf) if proximity else 1.0)
    value = float(np.sum(r * r))
    surrogate = float(np.sum(weights * r * r))
    coef = 2.0 * weights * r / np.where(norm > 0, norm, 1.0)
    coef = np.where(norm > 0, coef, 0.0)
    g_pad = _central_gradient_adjoint(coef[..., None] * grad, vs, pad.shape)
    return LossTerm(value, surrogate, {"sdf": grid.scatter_padded(g_pad, 1)}, weights)


def loss_normal(grid: SparseGrid, weights=None, proximity: bool = True) -> LossTerm:
    """``sum ||n(v + e_a) - n(v)||^2`` over axes, n the normalized gradient.

    Differences are per voxel step; nodes with ``||grad s|| < 1e-8`` or an
    incomplete stencil are skipped.
    """
    vs = grid.voxel_size
    idx, _ = grid.pad_index(2)
    pad = grid.padded(grid.sdf.astype(np.float64), 2)
    grad = _central_gradient(pad, vs)  # [T,18,18,18,3], G[i] <-> local node i-1
    valid = _stencil_valid(idx >= 0)
    norm = np.sqrt(np.sum(grad * grad, axis=-1))
    nvalid = valid & (norm >= 1e-8)
    n = grad / np.where(nvalid, norm, 1.0)[..., None]
    n[~nvalid] = 0.0
    own = (slice(None), slice(1, 17), slice(1, 17), slice(1, 17))
    if weights is None:
        weights = proximity_weighting(grid.sdf) if proximity else np.ones(grid.sdf.shape)
    value = 0.0
    surrogate = 0.0
    g_n = np.zeros_like(n)
    for a in range(3):
        nb = [slice(None), slice(1, 17), slice(1, 17), slice(1, 17)]
        nb[a + 1] = slice(2, 18)
        nb = tuple(nb)
        ok = nvalid[own] & nvalid[nb]
        diff = (n[nb] - n[own]) * ok[..., None]
        sq = np.sum(diff * diff, axis=-1)
        value += float(np.sum(sq))
        surrogate += float(np.sum(weights * sq))
        gd = 2.0 * weights[..., None] * diff
        g_n[nb] += gd
        g_n[own] -= gd
    g_grad = (g_n - n * np.sum(n * g_n, axis=-1, keepdims=True)) / np.where(nvalid, norm, 1.0)[..., None]
    g_grad[~nvalid] = 0.0
    g_pad = _central_gradient_adjoint(g_grad, vs, pad.shape)
    return LossTerm(value, surrogate, {"sdf": grid.scatter_padded(g_pad, 2)}, weights)


# ----------------------------------------------------------- feature terms
def loss_features(grid: SparseGrid, weights=None, eps: float = FEATURE_EPS) -> LossTerm:
    """Squared forward differences inside every 16x16 plane, relatively weighted."""
    P = grid.planes.astype(np.float64)  # [T,3,16,16,n_s]
    diffs = [P[:, :, 1:] - P[:, :, :-1], P[:, :, :, 1:] - P[:, :, :, :-1]]
    if weights is None:
        weights = (1.0 / (np.maximum(np.abs(P[:, :, 1:]), np.abs(P[:, :, :-1])) + eps),
                   1.0 / (np.maximum(np.abs(P[:, :, :, 1:]), np.abs(P[:, :, :, :-1])) + eps))
    g = np.zeros_like(P)
    value = 0.0
    surrogate = 0.0
    for ax, (d, w) in enumerate(zip(diffs, weights)):
        value += float(np.sum(d * d))
        surrogate += float(np.sum(w * d * d))
        gd = 2.0 * w * d
        if ax == 0:
            g[:, :, 1:] += gd
            g[:, :, :-1] -= gd
        else:
            g[:, :, :, 1:] += gd
            g[:, :, :, :-1] -= gd
    return LossTerm(value, surrogate, {"planes": g}, weights)


def probe_adjacency(grid: SparseGrid) -> np.ndarray:
    """Unordered 6-neighbor pairs ``[M, 2]`` of the probe lattice."""
    if "probe_pairs" in grid._cache:
        return grid._cache["probe_pairs"]
    pc = grid.probe_coords
    if len(pc) == 0:
        pairs = np.zeros((0, 2), np.int64)
    else:
        lo = pc.min(axis=0)
        dims = pc.max(axis=0) - lo + 2
        key = lambda q: ((q[:, 0] - lo[0]) * dims[1] + (q[:, 1] - lo[1])) * dims[2] + (q[:, 2] - lo[2])
        keys = key(pc)
        order = np.argsort(keys)
        sk = keys[order]
        out = []
        for a in range(3):
            e = np.zeros(3, np.int64)
            e[a] = 1
            nk = key(pc + e)
            pos = np.clip(np.searchsorted(sk, nk), 0, len(sk) - 1)
            hit = sk[pos] == nk
            out.append(np.stack([np.nonzero(hit)[0], order[pos[hit]]], axis=1))
        pairs = np.concatenate(out)
    grid._cache["probe_pairs"] = pairs
    return pairs


def loss_probes(grid: SparseGrid, weights=None) -> LossTerm:
    """``sum_i sum_j sum_{k in V_i} ||b_ij - b_kj||^2``.

    Every neighbor relation is symmetric, so each unordered pair is
    enumerated once and counted twice.
    """
    pairs = probe_adjacency(grid)
    B = grid.probes.astype(np.float64)
    d = B[pairs[:, 0]] - B[pairs[:, 1]]
    value = float(2.0 * np.sum(d * d))
    g = np.zeros_like(B)
    np.add.at(g, pairs[:, 0], 4.0 * d)
    np.add.at(g, pairs[:, 1], -4.0 * d)
    return LossTerm(value, value, {"probes": g}, None)

