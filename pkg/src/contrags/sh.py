"""Real spherical-harmonics color evaluation, degrees 0..3.

A codebook SH row is laid out coefficient-major: row[b*3 + ch] is the
coefficient of basis function b for channel ch. The viewed color is
basis(dir) . coeffs + 0.5 per channel, clamped below at zero.
"""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

COLOR_OFFSET = 0.5


def num_bases(degree: int) -> int:
    return (degree + 1) ** 2


def basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values at unit directions; dirs (..., 3) -> (..., (deg+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (num_bases(degree),))
    out[..., 0] = C0
    if degree >= 1:
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = C2[0] * x * y
        out[..., 5] = C2[1] * y * z
        out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = C2[3] * x * z
        out[..., 8] = C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9] = C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = C3[1] * x * y * z
        out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = C3[5] * z * (xx - yy)
        out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction, shape (..., (deg+1)^2, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(dirs.shape[:-1] + (num_bases(degree), 3))
    if degree >= 1:
        g[..., 1, 1] = -C1
        g[..., 2, 2] = C1
        g[..., 3, 0] = -C1
    if degree >= 2:
        g[..., 4, 0] = C2[0] * y
        g[..., 4, 1] = C2[0] * x
        g[..., 5, 1] = C2[1] * z
        g[..., 5, 2] = C2[1] * y
        g[..., 6, 0] = -2.0 * C2[2] * x
        g[..., 6, 1] = -2.0 * C2[2] * y
        g[..., 6, 2] = 4.0 * C2[2] * z
        g[..., 7, 0] = C2[3] * z
        g[..., 7, 2] = C2[3] * x
        g[..., 8, 0] = 2.0 * C2[4] * x
        g[..., 8, 1] = -2.0 * C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = C3[0] * 6.0 * x * y
        g[..., 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = C3[1] * y * z
        g[..., 10, 1] = C3[1] * x * z
        g[..., 10, 2] = C3[1] * x * y
        g[..., 11, 0] = -2.0 * C3[2] * x * y
        g[..., 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = 8.0 * C3[2] * y * z
        g[..., 12, 0] = -6.0 * C3[3] * x * z
        g[..., 12, 1] = -6.0 * C3[3] * y * z
        g[..., 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = -2.0 * C3[4] * x * y
        g[..., 13, 2] = 8.0 * C3[4] * x * z
        g[..., 14, 0] = 2.0 * C3[5] * x * z
        g[..., 14, 1] = -2.0 * C3[5] * y * z
        g[..., 14, 2] = C3[5] * (xx - yy)
        g[..., 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = -6.0 * C3[6] * x * y
    del zero
    return g


def eval_sh(sh_row: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Viewed RGB for one codebook row and one unit view direction."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValueError("view_dir must be a unit vector")
    coeffs = np.asarray(sh_row, dtype=np.float64).reshape(num_bases(degree), 3)
    rgb = basis(view_dir, degree) @ coeffs + COLOR_OFFSET
    return np.maximum(rgb, 0.0)


def eval_colors(rows: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Batched color evaluation: rows (N, 3B), unit dirs (N, 3) -> (N, 3)."""
    nb = num_bases(degree)
    coeffs = np.asarray(rows, dtype=np.float64).reshape(-1, nb, 3)
    b = basis(dirs, degree)
    rgb = np.einsum("nb,nbc->nc", b, coeffs) + COLOR_OFFSET
    return np.maximum(rgb, 0.0)
