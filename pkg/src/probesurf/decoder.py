"""Color decoder: tri-plane features + probe features + Fresnel powers -> RGB."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sh import eval_sh_basis, eval_sh_basis_grad

N_FRESNEL = 6
HIDDEN = 32


def fresnel_powers(n_dot_v) -> np.ndarray:
    """``(1 - n.v)^k`` for k = 0..5, with ``n.v`` clamped to [0, 1]."""
    u = 1.0 - np.clip(np.asarray(n_dot_v, dtype=np.float64), 0.0, 1.0)
    out = np.empty(u.shape + (N_FRESNEL,))
    out[..., 0] = 1.0
    for k in range(1, N_FRESNEL):
        out[..., k] = out[..., k - 1] * u
    return out


def fresnel_powers_grad(n_dot_v) -> np.ndarray:
    """d powers / d(n.v); zero where the clamp is active."""
    ndv = np.asarray(n_dot_v, dtype=np.float64)
    u = 1.0 - np.clip(ndv, 0.0, 1.0)
    out = np.zeros(u.shape + (N_FRESNEL,))
    for k in range(1, N_FRESNEL):
        out[..., k] = -k * u ** (k - 1)
    active = (ndv >= 0.0) & (ndv <= 1.0)
    return out * active[..., None]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class DecoderMlp:
    """Two hidden ReLU layers of width 32 and a sigmoid RGB head.

    Weights are stored ``[out, in]``. ``camera_bias`` (optional, ``[C, 32]``)
    is added to the first pre-activation.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    camera_bias: np.ndarray | None = None

    @classmethod
    def init(cls, n_in: int, rng=None, num_cameras: int = 0, hidden: int = HIDDEN,
             dtype=np.float32) -> "DecoderMlp":
        rng = np.random.default_rng(rng)

        def glorot(n_out, n_inp):
            lim = np.sqrt(6.0 / (n_inp + n_out))
            return rng.uniform(-lim, lim, size=(n_out, n_inp)).astype(dtype)

        cb = np.zeros((num_cameras, hidden), dtype=dtype) if num_cameras else None
        return cls(glorot(hidden, n_in), np.zeros(hidden, dtype), glorot(hidden, hidden),
                   np.zeros(hidden, dtype), glorot(3, hidden), np.zeros(3, dtype), cb)

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    def parameters(self) -> dict:
        p = {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2,
             "W3": self.W3, "b3": self.b3}
        if self.camera_bias is not None:
            p["camera_bias"] = self.camera_bias
        return p

    def copy(self) -> "DecoderMlp":
        cb = None if self.camera_bias is None else self.camera_bias.copy()
        return DecoderMlp(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(),
                          self.W3.copy(), self.b3.copy(), cb)

    def astype(self, dtype) -> "DecoderMlp":
        cb = None if self.camera_bias is None else self.camera_bias.astype(dtype)
        return DecoderMlp(*(a.astype(dtype) for a in (self.W1, self.b1, self.W2, self.b2,
                                                      self.W3, self.b3)), cb)

    def forward(self, x, camera_id=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"decoder expects {self.n_in} inputs, got {x.shape[-1]}")
        W1, W2, W3 = (w.astype(np.float64, copy=False) for w in (self.W1, self.W2, self.W3))
        a1 = x @ W1.T + self.b1
        if self.camera_bias is not None and camera_id is not None:
            cam = np.asarray(camera_id)
            if np.any(cam < 0) or np.any(cam >= len(self.camera_bias)):
                raise IndexError(f"camera id {camera_id} out of range for "
                                 f"{len(self.camera_bias)} camera biases")
            a1 = a1 + self.camera_bias[cam]
        h1 = np.maximum(a1, 0.0)
        h2 = np.maximum(h1 @ W2.T + self.b2, 0.0)
        rgb = sigmoid(h2 @ W3.T + self.b3)
        return rgb, (x, h1, h2, rgb, camera_id)

    def backward(self, cache, grad_rgb):
        """Returns ``(param_grads, grad_x)``."""
        x, h1, h2, rgb, camera_id = cache
        W1, W2, W3 = (w.astype(np.float64, copy=False) for w in (self.W1, self.W2, self.W3))
        g3 = grad_rgb * rgb * (1.0 - rgb)
        g2 = (g3 @ W3) * (h2 > 0)
        g1 = (g2 @ W2) * (h1 > 0)
        lead = tuple(range(g3.ndim - 1))
        grads = {
            "W3": g3.reshape(-1, 3).T @ h2.reshape(-1, h2.shape[-1]),
            "b3": g3.sum(axis=lead),
            "W2": g2.reshape(-1, g2.shape[-1]).T @ h1.reshape(-1, h1.shape[-1]),
            "b2": g2.sum(axis=lead),
            "W1": g1.reshape(-1, g1.shape[-1]).T @ x.reshape(-1, x.shape[-1]),
            "b1": g1.sum(axis=lead),
        }
        if self.camera_bias is not None:
            gcb = np.zeros(self.camera_bias.shape)
            if camera_id is not None:
                cam = np.broadcast_to(np.asarray(camera_id), g1.shape[:-1]).reshape(-1)
                np.add.at(gcb, cam, g1.reshape(-1, g1.shape[-1]))
            grads["camera_bias"] = gcb
        return grads, g1 @ W1


def decode_color(F_s, F_a, fresnel, mlp: DecoderMlp, camera_id=None):
    x = np.concatenate([np.asarray(F_s, np.float64), np.asarray(F_a, np.float64),
                        np.asarray(fresnel, np.float64)], axis=-1)
    rgb, _ = mlp.forward(x, camera_id)
    return rgb


def reflect(n, v):
    """Mirror ``v`` about ``n``: ``r = 2 (n.v) n - v``."""
    ndv = np.sum(n * v, axis=-1, keepdims=True)
    return 2.0 * ndv * n - v


@dataclass
class ViewSwitches:
    """View-time ablations; none of them touches stored parameters."""

    no_spatial: bool = False
    sh_order: int | None = None
    no_fresnel: bool = False


@dataclass
class DecodeCache:
    tid: np.ndarray
    plane_setup: tuple
    pf: np.ndarray
    normal_setup: tuple
    n: np.ndarray
    norm: np.ndarray
    deg: np.ndarray
    v: np.ndarray
    ndv: np.ndarray
    r: np.ndarray
    probe_w: np.ndarray
    blended: np.ndarray
    basis: np.ndarray
    mlp_cache: tuple
    switches: ViewSwitches = field(default_factory=ViewSwitches)


def decode_fused(grid, mlp: DecoderMlp, points, view_dirs, camera_id=None,
                 switches: ViewSwitches | None = None, keep_cache: bool = False):
    """Color of each point seen along ``view_dirs`` (unit, point -> camera).

    One pass: tri-plane features, smoothed-SDF normal, reflected vector,
    blended probe features, Fresnel powers and the MLP. ``points`` must lie
    in allocated tiles.
    """
    sw = switches or ViewSwitches()
    p = np.asarray(points, dtype=np.float64)
    v = np.asarray(view_dirs, dtype=np.float64)
    tid, local, frac = grid.locate(p)
    if np.any(tid < 0):
        raise ValueError("decode_fused called on a point outside allocated tiles")

    psetup = grid.plane_setup(tid, local)
    pf = grid.sample_planes(tid, local, psetup)
    F_s = pf[:, 0] * pf[:, 1] * pf[:, 2]
    if sw.no_spatial:
        F_s = np.zeros_like(F_s)

    g, nsetup = grid.sdf_gradient(p)
    norm = np.sqrt(np.sum(g * g, axis=-1))
    deg = norm < 1e-8
    n = g / np.where(deg, 1.0, norm)[:, None]
    n[deg] = v[deg]
    ndv = np.sum(n * v, axis=-1)
    r = 2.0 * ndv[:, None] * n - v

    order = grid.order
    w = grid.probe_corner_weights(frac)
    blended = grid.blended_probes(tid, w)
    basis = eval_sh_basis(r, order, check=False)
    if sw.sh_order is not None and sw.sh_order < order:
        basis[:, sw.sh_order ** 2:] = 0.0
    F_a = np.einsum("nj,njk->nk", basis, blended)

    fp = fresnel_powers(np.ones_like(ndv) if sw.no_fresnel else ndv)
    x = np.concatenate([F_s, F_a, fp], axis=-1)
    rgb, mcache = mlp.forward(x, camera_id)
    if not keep_cache:
        return rgb, None
    cache = DecodeCache(tid, psetup, pf, nsetup, n, norm, deg, v, ndv, r, w, blended,
                        basis, mcache, sw)
    return rgb, cache


def decode_fused_backward(grid, mlp: DecoderMlp, cache: DecodeCache, grad_rgb, grads: dict) -> None:
    """Accumulate parameter gradients of a fused decode into ``grads``.

    SDF gradients land in ``grads['sdf_pad1']`` (halo-1 padded layout).
    """
    sw = cache.switches
    mg, gx = mlp.backward(cache.mlp_cache, grad_rgb)
    for k, val in mg.items():
        grads[k] += val
    n_s, n_a = grid.n_s, grid.n_a
    gFs = gx[:, :n_s]
    gFa = gx[:, n_s:n_s + n_a]
    gfp = gx[:, n_s + n_a:]

    if not sw.no_spatial:
        pf = cache.pf
        gpf = np.stack([gFs * pf[:, 1] * pf[:, 2], gFs * pf[:, 0] * pf[:, 2],
                        gFs * pf[:, 0] * pf[:, 1]], axis=1)
        grads["planes"] += grid.planes_backward(gpf, cache.plane_setup)

    grad_blend = cache.basis[:, :, None] * gFa[:, None, :]
    grads["probes"] += grid.blended_probes_backward(cache.tid, cache.probe_w, grad_blend)

    # direction path: F_a(r(n)) and fresnel(n.v)
    jac = eval_sh_basis_grad(cache.r, grid.order)
    if sw.sh_order is not None and sw.sh_order < grid.order:
        jac[:, sw.sh_order ** 2:] = 0.0
    g_r = np.einsum("nk,njk,njd->nd", gFa, cache.blended, jac)
    g_ndv = np.zeros(len(gx)) if sw.no_fresnel else np.sum(fresnel_powers_grad(cache.ndv) * gfp, axis=-1)
    n, v, ndv = cache.n, cache.v, cache.ndv
    g_n = (2.0 * np.sum(g_r * n, axis=-1) + g_ndv)[:, None] * v + 2.0 * ndv[:, None] * g_r
    g_g = (g_n - n * np.sum(n * g_n, axis=-1, keepdims=True)) / np.where(cache.deg, 1.0, cache.norm)[:, None]
    g_g[cache.deg] = 0.0
    h = grid.voxel_size
    g_s = np.concatenate([g_g, -g_g], axis=-1) / (2.0 * h)
    grads["sdf_pad1"] += grid.sample_sdf_backward(g_s, cache.normal_setup)
