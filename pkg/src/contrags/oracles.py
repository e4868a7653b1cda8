"""Reference implementations used only by tests.

Everything here is written independently of the production renderer and
sampler: the rotation matrix comes from the outer-product quaternion
formula, the spherical-harmonics constants are derived from their closed
forms at import time, projection uses numpy's generic inverse, and
compositing is a literal per-pixel loop in double precision. Agreement
between these paths and the engine is the correctness argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .metrics import recon_loss
from .model import ModelState
from .render import GradientSet

_NEAR = 0.01
_BLUR = 0.3
_ALPHA_MAX = 0.99
_ALPHA_MIN = 1.0 / 255.0
_T_STOP = 1e-4

# Real SH normalization constants from their closed forms.
_K00 = 0.5 * np.sqrt(1.0 / np.pi)
_K1 = np.sqrt(3.0 / (4.0 * np.pi))
_K2 = [0.5 * np.sqrt(15.0 / np.pi), 0.25 * np.sqrt(5.0 / np.pi),
       0.25 * np.sqrt(15.0 / np.pi)]
_K3 = [0.25 * np.sqrt(35.0 / (2.0 * np.pi)), 0.5 * np.sqrt(105.0 / np.pi),
       0.25 * np.sqrt(21.0 / (2.0 * np.pi)), 0.25 * np.sqrt(7.0 / np.pi),
       0.25 * np.sqrt(105.0 / np.pi)]


def reference_sh_color(coeffs: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Viewed RGB from flattened coefficients (B*3,) and a unit direction."""
    x, y, z = d
    basis = [_K00]
    deg = int(round(np.sqrt(coeffs.size / 3.0))) - 1
    if deg >= 1:
        basis += [-_K1 * y, _K1 * z, -_K1 * x]
    if deg >= 2:
        basis += [_K2[0] * x * y, -_K2[0] * y * z,
                  _K2[1] * (2 * z * z - x * x - y * y),
                  -_K2[0] * x * z, _K2[2] * (x * x - y * y)]
    if deg >= 3:
        basis += [-_K3[0] * y * (3 * x * x - y * y),
                  _K3[1] * x * y * z,
                  -_K3[2] * y * (4 * z * z - x * x - y * y),
                  _K3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y),
                  -_K3[2] * x * (4 * z * z - x * x - y * y),
                  _K3[4] * z * (x * x - y * y),
                  -_K3[0] * x * (x * x - 3 * y * y)]
    rgb = np.asarray(basis) @ coeffs.reshape(-1, 3) + 0.5
    return np.maximum(rgb, 0.0)


def _rot_from_quat(q: np.ndarray) -> np.ndarray:
    """R via the outer-product identity (w^2-|v|^2) I + 2 v v^T + 2 w [v]x."""
    q = q / np.linalg.norm(q)
    w, v = q[0], q[1:]
    skew = np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])
    return (w * w - v @ v) * np.eye(3) + 2.0 * np.outer(v, v) + 2.0 * w * skew


def scene_from_state(state: ModelState) -> dict:
    """Double-precision copies of every array the reference paths need."""
    g = state.gaussians
    return {
        "positions": g.positions.astype(np.float64),
        "opacity_logits": g.opacity_logits.astype(np.float64),
        "g2sh": g.g2sh.copy(),
        "g2sr": g.g2sr.copy(),
        "sh_rows": state.sh.rows.astype(np.float64),
        "sr_rows": state.sr.rows.astype(np.float64),
        "sh_live": state.sh.live_indices(),
        "sr_live": state.sr.live_indices(),
        "degree": state.sh_degree,
    }


def _project_scene(scene: dict, cam: Camera):
    """Per-splat screen geometry; returns arrays in depth-then-index order."""
    pos = scene["positions"]
    n = len(pos)
    cam_center = -cam.rotation.T @ cam.translation
    means, conics, colors, opac, depth, gid = [], [], [], [], [], []
    for i in range(n):
        t = cam.rotation @ pos[i] + cam.translation
        if t[2] <= _NEAR:
            continue
        sr = scene["sr_rows"][scene["g2sr"][i]]
        R = _rot_from_quat(sr[3:7])
        S = np.diag(np.exp(sr[0:3]))
        sigma = R @ S @ S.T @ R.T
        J = np.array([[cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
                      [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
        M = J @ cam.rotation
        cov2d = M @ sigma @ M.T + _BLUR * np.eye(2)
        view = pos[i] - cam_center
        view = view / np.linalg.norm(view)
        means.append([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
        conics.append(np.linalg.inv(cov2d))
        colors.append(reference_sh_color(scene["sh_rows"][scene["g2sh"][i]], view))
        opac.append(1.0 / (1.0 + np.exp(-scene["opacity_logits"][i])))
        depth.append(t[2])
        gid.append(i)
    if not gid:
        return None
    order = np.lexsort((np.asarray(gid), np.asarray(depth)))
    return (np.asarray(means)[order], np.asarray(conics)[order],
            np.asarray(colors)[order], np.asarray(opac)[order])


def naive_render_scene(scene: dict, cam: Camera) -> np.ndarray:
    """Per-pixel front-to-back compositing over every Gaussian, no tiling."""
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    proj = _project_scene(scene, cam)
    if proj is None:
        return image
    means, conics, colors, opac = proj
    for py in range(H):
        for px in range(W):
            d = np.array([px + 0.5, py + 0.5]) - means
            power = -0.5 * (conics[:, 0, 0] * d[:, 0] ** 2
                            + conics[:, 1, 1] * d[:, 1] ** 2) \
                - conics[:, 0, 1] * d[:, 0] * d[:, 1]
            alpha = np.minimum(opac * np.exp(power), _ALPHA_MAX)
            alpha[alpha < _ALPHA_MIN] = 0.0
            t_after = np.cumprod(1.0 - alpha)
            t_before = np.concatenate(([1.0], t_after[:-1]))
            live = t_before >= _T_STOP
            w = alpha * t_before * live
            image[py, px] = w @ colors
    return image


def naive_render(state: ModelState, cam: Camera) -> np.ndarray:
    return naive_render_scene(scene_from_state(state), cam)


def _render_rows(scene: dict, cam: Camera) -> np.ndarray:
    """Row-vectorized twin of naive_render_scene for finite differencing.

    Identical per-pixel arithmetic, evaluated one image row at a time so the
    thousands of renders inside fd_gradient stay affordable.
    """
    H, W = cam.height, cam.width
    image = np.zeros((H, W, 3))
    proj = _project_scene(scene, cam)
    if proj is None:
        return image
    means, conics, colors, opac = proj
    xs = np.arange(W) + 0.5
    A = conics[:, 0, 0][:, None]
    B = conics[:, 0, 1][:, None]
    C = conics[:, 1, 1][:, None]
    ones = np.ones((1, W))
    for py in range(H):
        dx = xs[None, :] - means[:, 0][:, None]
        dy = (py + 0.5) - means[:, 1][:, None]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        alpha = np.minimum(opac[:, None] * np.exp(power), _ALPHA_MAX)
        alpha[alpha < _ALPHA_MIN] = 0.0
        t_after = np.cumprod(1.0 - alpha, axis=0)
        t_before = np.vstack([ones, t_after[:-1]])
        w = alpha * t_before * (t_before >= _T_STOP)
        image[py] = w.T @ colors
    return image


def fd_gradient(state: ModelState, cam: Camera, gt_image: np.ndarray,
                h: float = 1e-3, lambda_ssim: float = 0.2) -> GradientSet:
    """Central differences of the reconstruction loss over every parameter.

    Runs entirely on a float64 copy of the state through the reference
    renderer, including every live codebook row coordinate.
    """
    scene = scene_from_state(state)

    def loss() -> float:
        img = _render_rows(scene, cam)
        return recon_loss(img, gt_image, lambda_ssim)[2]

    def central(arr, index) -> float:
        orig = arr[index]
        arr[index] = orig + h
        up = loss()
        arr[index] = orig - h
        down = loss()
        arr[index] = orig
        return (up - down) / (2.0 * h)

    n = state.num_gaussians
    grads = GradientSet(
        positions=np.zeros((n, 3)),
        opacity_logits=np.zeros(n),
        sh_rows=np.zeros((state.sh.capacity, state.sh.dim)),
        sr_rows=np.zeros((state.sr.capacity, 7)),
    )
    for i in range(n):
        for a in range(3):
            grads.positions[i, a] = central(scene["positions"], (i, a))
        grads.opacity_logits[i] = central(scene["opacity_logits"], i)
    for r in scene["sh_live"]:
        for a in range(state.sh.dim):
            grads.sh_rows[r, a] = central(scene["sh_rows"], (r, a))
    for r in scene["sr_live"]:
        for a in range(7):
            grads.sr_rows[r, a] = central(scene["sr_rows"], (r, a))
    return grads


def acceptance_oracle(kind: str, u, lam: float, eps_split: float,
                      eps_merge: float, correction: bool = False) -> float:
    """Literal scalar evaluation of the split/merge acceptance formulas."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    with np.errstate(over="ignore"):
        q = np.exp(-(u @ u) / 2.0 * (1.0 / eps_split ** 2 - 1.0 / eps_merge ** 2))
        if correction:
            q = q * (eps_merge / eps_split) ** u.size
        if kind == "split":
            return float(min(1.0, np.exp(-lam) / q))
        if kind == "merge":
            return float(min(1.0, np.exp(lam) * q))
    raise ValueError(f"unknown kind {kind!r}")


@dataclass
class OracleReport:
    max_abs_err: float
    max_rel_err: float
    failing: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failing


def compare_arrays(name: str, actual: np.ndarray, expected: np.ndarray,
                   abs_tol: float = None, rel_tol: float = None) -> OracleReport:
    """Elementwise comparison; failures are recorded as (name, index) pairs."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    diff = np.abs(actual - expected)
    scale = max(float(np.max(np.abs(expected)), ), 1e-12)
    max_abs = float(diff.max()) if diff.size else 0.0
    max_rel = max_abs / scale
    failing = []
    if abs_tol is not None and max_abs > abs_tol:
        idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
        failing.append((name, idx, "abs", max_abs))
    if rel_tol is not None and max_rel > rel_tol:
        idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
        failing.append((name, idx, "rel", max_rel))
    return OracleReport(max_abs_err=max_abs, max_rel_err=max_rel, failing=failing)


@dataclass
class ChainStats:
    live_sh: list = field(default_factory=list)
    live_sr: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    split_attempts: int = 0
    split_accepts: int = 0
    merge_attempts: int = 0
    merge_accepts: int = 0
    final_n: int = 0


def chain_probe(state: ModelState, views: list, config, iters: int,
                rng=None, stop_when=None) -> ChainStats:
    """Drive the training chain and collect codebook-size trajectories.

    `stop_when(stats, state)` may end the run early once a property under
    test has been observed.
    """
    from .sampler import train_step
    if rng is None:
        rng = np.random.default_rng(config.seed)
    stats = ChainStats()
    for _ in range(iters):
        rec = train_step(state, views, config, rng)
        stats.live_sh.append(rec.live_sh)
        stats.live_sr.append(rec.live_sr)
        if np.isfinite(rec.recon):
            stats.recon.append(rec.recon)
        if rec.kind == "split":
            stats.split_attempts += rec.attempts
            stats.split_accepts += rec.accepts
        elif rec.kind == "merge":
            stats.merge_attempts += rec.attempts
            stats.merge_accepts += rec.accepts
        if stop_when is not None and stop_when(stats, state):
            break
    stats.final_n = state.num_gaussians
    return stats
