"""Real spherical harmonics and light-field probe evaluation.

Orders are one-indexed: order ``l`` has ``l*l`` coefficients (band 0 .. l-1).
Coefficients are stored band-major with ``m`` ascending, so a probe block
has shape ``[l*l, n_a]``.
"""
from __future__ import annotations

import numpy as np

MAX_ORDER = 4
UNIT_TOL = 1e-6

# normalization constants of the real basis (no Condon-Shortley phase)
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)
_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
       0.3731763325901154, 1.445305721320277)


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


def num_coeffs(order: int) -> int:
    check_order(order)
    return order * order


def check_order(order: int) -> None:
    if order not in (1, 2, 3, 4):
        raise ContractError(f"sh order must be in 1..{MAX_ORDER}, got {order}")


def eval_sh_basis(dirs, order: int, check: bool = True) -> np.ndarray:
    """Evaluate Y_1..Y_{l^2} for unit directions of shape ``[..., 3]``."""
    check_order(order)
    d = np.asarray(dirs)
    if d.shape[-1] != 3:
        raise ContractError(f"directions must have a trailing axis of 3, got {d.shape}")
    if check and d.size:
        norm = np.sqrt(np.sum(d * d, axis=-1))
        if np.any(np.abs(norm - 1.0) > UNIT_TOL):
            raise ContractError("sh basis requires unit-length directions")
    dtype = d.dtype if d.dtype.kind == "f" else np.float64
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (order * order,), dtype=dtype)
    out[..., 0] = _C0
    if order > 1:
        out[..., 1] = _C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = _C1 * x
    if order > 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = _C2[0] * y * z
        out[..., 6] = _C2[1] * (3.0 * zz - 1.0)
        out[..., 7] = _C2[0] * x * z
        out[..., 8] = _C2[2] * (xx - yy)
    if order > 3:
        out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = _C3[2] * y * (5.0 * zz - 1.0)
        out[..., 12] = _C3[3] * z * (5.0 * zz - 3.0)
        out[..., 13] = _C3[2] * x * (5.0 * zz - 1.0)
        out[..., 14] = _C3[4] * z * (xx - yy)
        out[..., 15] = _C3[0] * x * (xx - 3.0 * yy)
    return out


def eval_sh_basis_grad(dirs, order: int) -> np.ndarray:
    """Jacobian dY_j/d(dir) of the polynomial basis, shape ``[..., l^2, 3]``.

    The polynomials are differentiated as functions on R^3; callers that move
    the direction off the sphere are responsible for the projection.
    """
    check_order(order)
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    g = np.zeros(d.shape[:-1] + (order * order, 3), dtype=d.dtype)
    if order > 1:
        g[..., 1, 1] = _C1
        g[..., 2, 2] = _C1
        g[..., 3, 0] = _C1
    if order > 2:
        a, b, c = _C2
        g[..., 4, 0] = a * y
        g[..., 4, 1] = a * x
        g[..., 5, 1] = a * z
        g[..., 5, 2] = a * y
        g[..., 6, 2] = b * 6.0 * z
        g[..., 7, 0] = a * z
        g[..., 7, 2] = a * x
        g[..., 8, 0] = c * 2.0 * x
        g[..., 8, 1] = -c * 2.0 * y
    if order > 3:
        xx, yy, zz = x * x, y * y, z * z
        c0, c1, c2, c3, c4 = _C3
        g[..., 9, 0] = c0 * 6.0 * x * y
        g[..., 9, 1] = c0 * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = c1 * y * z
        g[..., 10, 1] = c1 * x * z
        g[..., 10, 2] = c1 * x * y
        g[..., 11, 1] = c2 * (5.0 * zz - 1.0)
        g[..., 11, 2] = c2 * 10.0 * y * z
        g[..., 12, 2] = c3 * (15.0 * zz - 3.0)
        g[..., 13, 0] = c2 * (5.0 * zz - 1.0)
        g[..., 13, 2] = c2 * 10.0 * x * z
        g[..., 14, 0] = c4 * 2.0 * x * z
        g[..., 14, 1] = -c4 * 2.0 * y * z
        g[..., 14, 2] = c4 * (xx - yy)
        g[..., 15, 0] = c0 * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = -c0 * 6.0 * x * y
    return g


def eval_probe(coeffs, dirs, n_a: int | None = None) -> np.ndarray:
    """Angular features ``F_a[k] = sum_j coeffs[j, k] * Y_j(dir)``.

    ``coeffs`` is ``[l^2, n_a]`` (or batched ``[..., l^2, n_a]`` matching
    the leading axes of ``dirs``).
    """
    c = np.asarray(coeffs)
    if n_a is not None and c.shape[-1] != n_a:
        raise ContractError(f"probe has {c.shape[-1]} channels, expected {n_a}")
    nc = c.shape[-2]
    order = int(round(np.sqrt(nc)))
    if order * order != nc:
        raise ContractError(f"probe block has {nc} rows, not a square count")
    y = eval_sh_basis(dirs, order)
    return np.einsum("...j,...jk->...k", y, c)


def trilinear_weights(frac) -> np.ndarray:
    """Corner weights ``[..., 8]`` for fractional coords ``[..., 3]`` in [0, 1].

    Corner ``c`` has bits ``(c & 1, c >> 1 & 1, c >> 2 & 1)`` along x, y, z.
    """
    f = np.asarray(frac)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    w = np.empty(f.shape[:-1] + (8,), dtype=f.dtype)
    for c in range(8):
        wx = fx if c & 1 else gx
        wy = fy if c & 2 else gy
        wz = fz if c & 4 else gz
        w[..., c] = wx * wy * wz
    return w


def blend_coeffs(corner_coeffs, weights) -> np.ndarray:
    """Blend ``[..., 8, l^2, n_a]`` corner blocks with ``[..., 8]`` weights."""
    return np.einsum("...i,...ijk->...jk", weights, corner_coeffs)


def interp_probes(corner_coeffs, weights, dirs) -> np.ndarray:
    """Angular features of a point from its 8 corner probes.

    Coefficients are blended first and the blended probe is evaluated once,
    which costs one basis evaluation instead of eight.
    """
    return eval_probe(blend_coeffs(corner_coeffs, weights), dirs)


def interp_probes_per_corner(corner_coeffs, weights, dirs) -> np.ndarray:
    """Same quantity as :func:`interp_probes`, evaluating every corner probe."""
    c = np.asarray(corner_coeffs)
    nc = c.shape[-2]
    y = eval_sh_basis(dirs, int(round(np.sqrt(nc))))
    per_corner = np.einsum("...j,...ijk->...ik", y, c)
    return np.einsum("...i,...ik->...k", weights, per_corner)


def backprop_probe(grad_fa, weights, dirs, order: int | None = None, basis=None) -> np.ndarray:
    """Gradient of the blended-probe features w.r.t. each corner coefficient.

    Returns ``[..., 8, l^2, n_a]`` with ``d/d b_ij[k] = grad_fa[k] * Y_j * w_i``.
    """
    if basis is None:
        basis = eval_sh_basis(dirs, order)
    return np.einsum("...i,...j,...k->...ijk", weights, basis, grad_fa)


def backprop_probe_dir(grad_fa, blended, dirs, order: int) -> np.ndarray:
    """Gradient of ``F_a`` w.r.t. the (unconstrained) lookup direction."""
    jac = eval_sh_basis_grad(dirs, order)
    # dF_a[k]/d dir = sum_j blended[j, k] * dY_j/d dir
    return np.einsum("...k,...jk,...jd->...d", grad_fa, blended, jac)


def truncate(coeffs, order: int) -> np.ndarray:
    """Copy of ``coeffs`` with all bands at or above ``order`` zeroed."""
    out = np.array(coeffs, copy=True)
    out[..., order * order:, :] = 0.0
    return out


def raise_order(coeffs, new_order: int) -> np.ndarray:
    """Pad a ``[..., l^2, n_a]`` block with zero rows up to ``new_order``."""
    check_order(new_order)
    c = np.asarray(coeffs)
    n_old = c.shape[-2]
    n_new = new_order * new_order
    if n_new < n_old:
        raise ContractError("cannot lower the sh order by padding")
    pad = [(0, 0)] * c.ndim
    pad[-2] = (0, n_new - n_old)
    return np.pad(c, pad)
