"""Differentiable splat rasterizer: tiled forward pass and analytic adjoint.

Geometry follows the EWA splatting pipeline: each 3-D Gaussian is projected
through the camera's affine-linearized perspective map, dilated by a fixed
low-pass term, and alpha-composited front to back in 16x16 pixel tiles.
The backward pass returns gradients for positions, opacity logits and the
shared codebook rows, summing over all Gaussians mapped to a row.

All internal arithmetic runs in float64 regardless of the float32 storage
dtype so the tiled pass, the naive reference renderer and the adjoint agree
far below test tolerances.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import sh as shlib
from .camera import Camera
from .model import ModelState

NEAR_PLANE = 0.01
BLUR_PX2 = 0.3            # low-pass dilation added to the 2-D covariance
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TMIN = 1e-4               # per-pixel termination transmittance
TILE = 16
# Any pixel with alpha >= ALPHA_SKIP lies within this many standard
# deviations of the center (opacity < 1), so the footprint is exact.
FOOTPRINT_SIGMAS = float(np.sqrt(2.0 * np.log(255.0)))


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero quaternion")
    return q / norms


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) in (w, x, y, z) order to rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rot_partials(q: np.ndarray) -> np.ndarray:
    """dR/dq at unit quaternions: (..., 4, 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    o = np.zeros_like(w)
    P = np.empty(q.shape[:-1] + (4, 3, 3))
    P[..., 0, :, :] = 2 * np.stack([
        np.stack([o, -z, y], -1),
        np.stack([z, o, -x], -1),
        np.stack([-y, x, o], -1)], -2)
    P[..., 1, :, :] = 2 * np.stack([
        np.stack([o, y, z], -1),
        np.stack([y, -2 * x, -w], -1),
        np.stack([z, w, -2 * x], -1)], -2)
    P[..., 2, :, :] = 2 * np.stack([
        np.stack([-2 * y, x, w], -1),
        np.stack([x, o, z], -1),
        np.stack([-w, z, -2 * y], -1)], -2)
    P[..., 3, :, :] = 2 * np.stack([
        np.stack([-2 * z, -w, x], -1),
        np.stack([w, -2 * z, y], -1),
        np.stack([x, y, o], -1)], -2)
    return P


def build_covariances(sr_rows: np.ndarray) -> np.ndarray:
    """3-D covariances R(q) S S^T R(q)^T for SR rows (..., 7) -> (..., 3, 3)."""
    rows = np.asarray(sr_rows, dtype=np.float64)
    q = normalize_quaternions(rows[..., 3:7])
    R = quat_to_rot(q)
    scales2 = np.exp(2.0 * rows[..., 0:3])
    return np.einsum("...ik,...k,...jk->...ij", R, scales2, R)


def build_covariance(sr_row: np.ndarray) -> np.ndarray:
    """Single-row convenience wrapper around build_covariances."""
    row = np.asarray(sr_row, dtype=np.float64).reshape(7)
    return build_covariances(row)


@dataclass
class ProjectedSplat:
    mean2d: np.ndarray          # (2,) pixels
    conic: np.ndarray           # (2, 2) inverse 2-D covariance
    depth: float                # camera-space z
    tile_span: tuple            # inclusive pixel rect (x0, x1, y0, y1)
    color: Optional[np.ndarray] = None
    opacity: Optional[float] = None


def _pixel_rect(mean2d, radius, width, height):
    x0 = max(0, int(np.ceil(mean2d[0] - radius - 0.5)))
    x1 = min(width - 1, int(np.floor(mean2d[0] + radius - 0.5)))
    y0 = max(0, int(np.ceil(mean2d[1] - radius - 0.5)))
    y1 = min(height - 1, int(np.floor(mean2d[1] + radius - 0.5)))
    return x0, x1, y0, y1


def project_gaussian(mu: np.ndarray, cov3d: np.ndarray, cam: Camera,
                     near: float = NEAR_PLANE) -> Optional[ProjectedSplat]:
    """Project one Gaussian; returns None when culled by the near plane."""
    mu = np.asarray(mu, dtype=np.float64).reshape(3)
    t = cam.world_to_camera(mu)
    if t[2] <= near:
        return None
    tx, ty, tz = t
    mean2d = np.array([cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy])
    J = np.array([[cam.fx / tz, 0.0, -cam.fx * tx / tz ** 2],
                  [0.0, cam.fy / tz, -cam.fy * ty / tz ** 2]])
    M = J @ cam.rotation
    cov2d = M @ np.asarray(cov3d, dtype=np.float64) @ M.T + BLUR_PX2 * np.eye(2)
    conic = np.linalg.inv(cov2d)
    lam_max = 0.5 * (cov2d[0, 0] + cov2d[1, 1]) + np.sqrt(
        0.25 * (cov2d[0, 0] - cov2d[1, 1]) ** 2 + cov2d[0, 1] ** 2)
    radius = FOOTPRINT_SIGMAS * np.sqrt(lam_max) + 1e-9
    span = _pixel_rect(mean2d, radius, cam.width, cam.height)
    return ProjectedSplat(mean2d=mean2d, conic=conic, depth=float(tz), tile_span=span)


class _Projection:
    """Batched per-splat geometry shared by the forward and backward passes."""

    __slots__ = ("idx", "t", "mean2d", "conic", "cov2d", "M", "cov3d", "colors",
                 "color_raw", "opac", "radius", "viewdir", "viewlen", "order")

    def __init__(self, state: ModelState, cam: Camera):
        g = state.gaussians
        pos = g.positions.astype(np.float64)
        t_all = cam.world_to_camera(pos)
        visible = t_all[:, 2] > NEAR_PLANE
        idx = np.flatnonzero(visible)
        t = t_all[idx]
        self.idx = idx
        self.t = t

        fx, fy = cam.fx, cam.fy
        tz = t[:, 2]
        self.mean2d = np.stack([fx * t[:, 0] / tz + cam.cx,
                                fy * t[:, 1] / tz + cam.cy], axis=1)

        J = np.zeros((len(idx), 2, 3))
        J[:, 0, 0] = fx / tz
        J[:, 0, 2] = -fx * t[:, 0] / tz ** 2
        J[:, 1, 1] = fy / tz
        J[:, 1, 2] = -fy * t[:, 1] / tz ** 2
        M = J @ cam.rotation
        self.M = M

        sr_rows = state.sr.rows[g.g2sr[idx]]
        cov3d = build_covariances(sr_rows)
        self.cov3d = cov3d
        cov2d = np.einsum("nab,nbc,ndc->nad", M, cov3d, M)
        cov2d[:, 0, 0] += BLUR_PX2
        cov2d[:, 1, 1] += BLUR_PX2
        self.cov2d = cov2d

        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        conic = np.empty_like(cov2d)
        conic[:, 0, 0] = cov2d[:, 1, 1] / det
        conic[:, 1, 1] = cov2d[:, 0, 0] / det
        conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det
        self.conic = conic

        lam_max = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1]) + np.sqrt(
            0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2)
        self.radius = FOOTPRINT_SIGMAS * np.sqrt(lam_max) + 1e-9

        cam_center = cam.center()
        view = pos[idx] - cam_center
        self.viewlen = np.linalg.norm(view, axis=1)
        self.viewdir = view / self.viewlen[:, None]

        degree = state.sh_degree
        sh_rows = state.sh.rows[g.g2sh[idx]]
        nb = shlib.num_bases(degree)
        coeffs = sh_rows.astype(np.float64).reshape(-1, nb, 3)
        raw = np.einsum("nb,nbc->nc", shlib.basis(self.viewdir, degree), coeffs) + shlib.COLOR_OFFSET
        self.color_raw = raw
        self.colors = np.maximum(raw, 0.0)

        self.opac = 1.0 / (1.0 + np.exp(-g.opacity_logits[idx].astype(np.float64)))

        # Global compositing order: ascending depth, ties broken by index.
        self.order = np.lexsort((idx, tz))


@dataclass
class RenderArtifacts:
    image: np.ndarray                 # (H, W, 3)
    final_transmittance: np.ndarray   # (H, W)
    tile_splats: dict                 # (ty, tx) -> gaussian indices in depth order
    contrib_counts: np.ndarray        # (H, W) int32
    state_token: bytes


@dataclass
class GradientSet:
    positions: np.ndarray        # (N, 3)
    opacity_logits: np.ndarray   # (N,)
    sh_rows: np.ndarray          # (sh capacity, sh dim)
    sr_rows: np.ndarray          # (sr capacity, 7)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in
                   (self.positions, self.opacity_logits, self.sh_rows, self.sr_rows))


def state_camera_token(state: ModelState, cam: Camera) -> bytes:
    h = hashlib.sha256()
    g = state.gaussians
    for arr in (g.positions, g.opacity_logits, g.g2sh, g.g2sr,
                state.sh.rows, state.sh.refcount, state.sr.rows, state.sr.refcount):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.ascontiguousarray(cam.rotation).tobytes())
    h.update(np.ascontiguousarray(cam.translation).tobytes())
    h.update(np.float64([cam.fx, cam.fy, cam.cx, cam.cy]).tobytes())
    h.update(np.int64([cam.width, cam.height]).tobytes())
    return h.digest()


def _bin_tiles(proj: _Projection, cam: Camera):
    """Per-tile lists of positions into proj.order, preserving depth order."""
    ntx = (cam.width + TILE - 1) // TILE
    nty = (cam.height + TILE - 1) // TILE
    tiles = {(ty, tx): [] for ty in range(nty) for tx in range(ntx)}
    mean2d = proj.mean2d
    radius = proj.radius
    for pos_in_order, s in enumerate(proj.order):
        x0, x1, y0, y1 = _pixel_rect(mean2d[s], radius[s], cam.width, cam.height)
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                tiles[(ty, tx)].append(pos_in_order)
    return {key: np.asarray(v, dtype=np.int64) for key, v in tiles.items()}


def _tile_pixels(ty, tx, cam):
    y0, y1 = ty * TILE, min((ty + 1) * TILE, cam.height)
    x0, x1 = tx * TILE, min((tx + 1) * TILE, cam.width)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    centers = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    return (y0, y1, x0, x1), centers


def _tile_alphas(proj: _Projection, sel: np.ndarray, centers: np.ndarray):
    """Per-splat-per-pixel compositing terms for one tile.

    Returns (alpha, keep, active, t_before) with shape (K, P); alpha is
    already zeroed below the skip threshold.
    """
    mean = proj.mean2d[sel]
    conic = proj.conic[sel]
    d = centers[None, :, :] - mean[:, None, :]
    power = -0.5 * (conic[:, None, 0, 0] * d[..., 0] ** 2
                    + conic[:, None, 1, 1] * d[..., 1] ** 2) \
        - conic[:, None, 0, 1] * d[..., 0] * d[..., 1]
    alpha = proj.opac[sel, None] * np.exp(power)
    np.minimum(alpha, ALPHA_CLAMP, out=alpha)
    keep = alpha >= ALPHA_SKIP
    alpha = np.where(keep, alpha, 0.0)
    t_after = np.cumprod(1.0 - alpha, axis=0)
    t_before = np.vstack([np.ones((1, alpha.shape[1])), t_after[:-1]])
    active = t_before >= TMIN
    return alpha, keep, active, t_before, d


def rasterize_forward(state: ModelState, cam: Camera) -> RenderArtifacts:
    """Front-to-back alpha compositing over 16x16 tiles; background is black."""
    proj = _Projection(state, cam)
    tiles = _bin_tiles(proj, cam)

    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    counts = np.zeros((H, W), dtype=np.int32)
    tile_lists = {}

    ordered = proj.order
    for (ty, tx), members in tiles.items():
        (y0, y1, x0, x1), centers = _tile_pixels(ty, tx, cam)
        sel = ordered[members]
        tile_lists[(ty, tx)] = proj.idx[sel]
        if len(sel) == 0:
            continue
        alpha, keep, active, t_before, _ = _tile_alphas(proj, sel, centers)
        weight = alpha * t_before * active
        tile_img = np.einsum("kp,kc->pc", weight, proj.colors[sel])
        shape = (y1 - y0, x1 - x0)
        image[y0:y1, x0:x1] = tile_img.reshape(shape + (3,))
        trans[y0:y1, x0:x1] = np.prod(np.where(active, 1.0 - alpha, 1.0), axis=0).reshape(shape)
        counts[y0:y1, x0:x1] = (keep & active).sum(axis=0).reshape(shape)

    return RenderArtifacts(image=image, final_transmittance=trans,
                           tile_splats=tile_lists, contrib_counts=counts,
                           state_token=state_camera_token(state, cam))


def rasterize_backward(state: ModelState, cam: Camera,
                       artifacts: RenderArtifacts,
                       dL_dimage: np.ndarray) -> GradientSet:
    """Adjoint of rasterize_forward for the given upstream image gradient.

    A codebook row shared by several Gaussians receives the sum of the
    per-Gaussian row gradients; quaternion gradients are pulled back through
    normalization and scale gradients through the exponential.
    """
    if artifacts.state_token != state_camera_token(state, cam):
        raise ValueError("stale artifacts: state or camera changed since the forward pass")
    dL_dimage = np.asarray(dL_dimage, dtype=np.float64)
    if dL_dimage.shape != (cam.height, cam.width, 3):
        raise ValueError("dL_dimage shape mismatch")

    proj = _Projection(state, cam)
    tiles = _bin_tiles(proj, cam)
    ordered = proj.order
    V = len(proj.idx)

    d_color = np.zeros((V, 3))
    d_opac = np.zeros(V)
    d_mean2d = np.zeros((V, 2))
    d_conic = np.zeros((V, 3))  # packed (A, B, C) for [[A, B], [B, C]]

    for (ty, tx), members in tiles.items():
        if len(members) == 0:
            continue
        (y0, y1, x0, x1), centers = _tile_pixels(ty, tx, cam)
        sel = ordered[members]
        alpha, keep, active, t_before, d = _tile_alphas(proj, sel, centers)
        gpix = dL_dimage[y0:y1, x0:x1].reshape(-1, 3)

        weight = alpha * t_before * active
        np.add.at(d_color, sel, np.einsum("kp,pc->kc", weight, gpix))

        contrib = weight[:, :, None] * proj.colors[sel][:, None, :]
        suffix = np.flip(np.cumsum(np.flip(contrib, 0), axis=0), 0) - contrib

        colors = proj.colors[sel][:, None, :]
        dC_dalpha = colors * t_before[:, :, None] - suffix / (1.0 - alpha)[:, :, None]
        d_alpha = np.einsum("kpc,pc->kp", dC_dalpha, gpix)
        # No gradient through skipped, terminated or clamp-saturated terms.
        flow = keep & active & (alpha < ALPHA_CLAMP)
        d_alpha = np.where(flow, d_alpha, 0.0)

        G = alpha / proj.opac[sel, None]
        np.add.at(d_opac, sel, np.einsum("kp,kp->k", d_alpha, G))
        d_power = d_alpha * alpha

        cd_x = proj.conic[sel][:, None, 0, 0] * d[..., 0] + proj.conic[sel][:, None, 0, 1] * d[..., 1]
        cd_y = proj.conic[sel][:, None, 0, 1] * d[..., 0] + proj.conic[sel][:, None, 1, 1] * d[..., 1]
        np.add.at(d_mean2d, sel, np.stack([
            np.einsum("kp,kp->k", d_power, cd_x),
            np.einsum("kp,kp->k", d_power, cd_y)], axis=1))

        np.add.at(d_conic, sel, np.stack([
            np.einsum("kp,kp->k", d_power, -0.5 * d[..., 0] ** 2),
            np.einsum("kp,kp->k", d_power, -d[..., 0] * d[..., 1]),
            np.einsum("kp,kp->k", d_power, -0.5 * d[..., 1] ** 2)], axis=1))

    return _pull_back(state, cam, proj, d_color, d_opac, d_mean2d, d_conic)


def _pull_back(state, cam, proj, d_color, d_opac, d_mean2d, d_conic):
    """Chain per-splat screen-space gradients to model parameters."""
    g = state.gaussians
    N = g.count
    idx = proj.idx
    t = proj.t
    fx, fy = cam.fx, cam.fy
    tz = t[:, 2]

    d_conic_full = np.empty((len(idx), 2, 2))
    d_conic_full[:, 0, 0] = d_conic[:, 0]
    d_conic_full[:, 1, 1] = d_conic[:, 2]
    d_conic_full[:, 0, 1] = d_conic_full[:, 1, 0] = 0.5 * d_conic[:, 1]

    conic = proj.conic
    d_cov2d = -np.einsum("nab,nbc,ncd->nad", conic, d_conic_full, conic)

    M = proj.M
    d_cov3d = np.einsum("nba,nbc,ncd->nad", M, d_cov2d, M)
    d_M = 2.0 * np.einsum("nab,nbc,ncd->nad", d_cov2d, M, proj.cov3d)
    d_J = np.einsum("nab,cb->nac", d_M, cam.rotation)

    d_t = np.zeros_like(t)
    d_t[:, 0] = d_mean2d[:, 0] * fx / tz + d_J[:, 0, 2] * (-fx / tz ** 2)
    d_t[:, 1] = d_mean2d[:, 1] * fy / tz + d_J[:, 1, 2] * (-fy / tz ** 2)
    d_t[:, 2] = (d_mean2d[:, 0] * (-fx * t[:, 0] / tz ** 2)
                 + d_mean2d[:, 1] * (-fy * t[:, 1] / tz ** 2)
                 + d_J[:, 0, 0] * (-fx / tz ** 2)
                 + d_J[:, 1, 1] * (-fy / tz ** 2)
                 + d_J[:, 0, 2] * (2 * fx * t[:, 0] / tz ** 3)
                 + d_J[:, 1, 2] * (2 * fy * t[:, 1] / tz ** 3))
    d_pos_v = d_t @ cam.rotation

    # Color path: SH coefficients and the view-direction dependence.
    degree = state.sh_degree
    nb = shlib.num_bases(degree)
    gate = (proj.color_raw > 0.0).astype(np.float64)
    d_raw = d_color * gate
    B = shlib.basis(proj.viewdir, degree)
    d_coeffs = np.einsum("nb,nc->nbc", B, d_raw)

    if degree >= 1:
        coeffs = state.sh.rows[g.g2sh[idx]].astype(np.float64).reshape(-1, nb, 3)
        Bg = shlib.basis_grad(proj.viewdir, degree)
        d_view = np.einsum("nc,nbc,nbd->nd", d_raw, coeffs, Bg)
        v = proj.viewdir
        proj_mat = np.eye(3)[None, :, :] - np.einsum("na,nb->nab", v, v)
        d_pos_v += np.einsum("nab,nb->na", proj_mat, d_view) / proj.viewlen[:, None]

    # Covariance path back to SR rows (log-scales, quaternion).
    sr_rows = state.sr.rows[g.g2sr[idx]].astype(np.float64)
    qn = normalize_quaternions(sr_rows[:, 3:7])
    R = quat_to_rot(qn)
    scales2 = np.exp(2.0 * sr_rows[:, 0:3])
    d_D = np.einsum("nba,nbc,ncd->nad", R, d_cov3d, R)
    d_ls = np.einsum("nii->ni", d_D) * 2.0 * scales2
    d_R = 2.0 * np.einsum("nab,nbc,nc->nac", d_cov3d, R, scales2)
    partials = quat_rot_partials(qn)
    d_qn = np.einsum("nab,nqab->nq", d_R, partials)
    qraw = sr_rows[:, 3:7]
    qnorm = np.linalg.norm(qraw, axis=1)
    proj_q = np.eye(4)[None, :, :] - np.einsum("na,nb->nab", qn, qn)
    d_q = np.einsum("nab,nb->na", proj_q, d_qn) / qnorm[:, None]

    d_logit_v = d_opac * proj.opac * (1.0 - proj.opac)

    grads = GradientSet(
        positions=np.zeros((N, 3)),
        opacity_logits=np.zeros(N),
        sh_rows=np.zeros((state.sh.capacity, state.sh.dim)),
        sr_rows=np.zeros((state.sr.capacity, 7)),
    )
    grads.positions[idx] = d_pos_v
    grads.opacity_logits[idx] = d_logit_v
    np.add.at(grads.sh_rows, g.g2sh[idx], d_coeffs.reshape(len(idx), -1))
    d_sr = np.concatenate([d_ls, d_q], axis=1)
    np.add.at(grads.sr_rows, g.g2sr[idx], d_sr)
    return grads
