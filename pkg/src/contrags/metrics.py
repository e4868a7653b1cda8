"""Reconstruction loss, codebook-size penalty and image quality metrics.

The reconstruction loss blends mean absolute error with structural
dissimilarity computed over an 11x11 Gaussian window (sigma 1.5), valid
positions only. Both the loss and its gradient with respect to the rendered
image are provided so the sampler can run plain gradient-based updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP_DB = 100.0


def _ssim_kernel1d() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    return k / k.sum()

_KERNEL1D = _ssim_kernel1d()
_HALF = SSIM_WINDOW // 2


def _corr_valid(x: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with the Gaussian window."""
    out = correlate1d(x, _KERNEL1D, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL1D, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _corr_adjoint(g: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _corr_valid: scatter window partials back to pixels."""
    pad = np.zeros(shape)
    pad[_HALF:-_HALF, _HALF:-_HALF] = g
    out = correlate1d(pad, _KERNEL1D, axis=0, mode="constant")
    return correlate1d(out, _KERNEL1D, axis=1, mode="constant")


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ValueError("images must be HxW or HxWxC")
    return a, b


def _window_stats(x: np.ndarray, y: np.ndarray):
    """Valid-mode windowed moments for one channel."""
    return (_corr_valid(x), _corr_valid(y), _corr_valid(x * x),
            _corr_valid(y * y), _corr_valid(x * y))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over valid window positions and channels."""
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    total = 0.0
    count = 0
    for c in range(a.shape[2]):
        mx, my, ex2, ey2, exy = _window_stats(a[:, :, c], b[:, :, c])
        sx = ex2 - mx * mx
        sy = ey2 - my * my
        sxy = exy - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2)
        smap = num / den
        total += smap.sum()
        count += smap.size
    return total / count


def ssim_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d mean-SSIM / d a, same shape as a."""
    a, b = _check_pair(a, b)
    grad = np.zeros_like(a)
    count = 0
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        mx, my, ex2, ey2, exy = _window_stats(x, y)
        sx = ex2 - mx * mx
        sy = ey2 - my * my
        sxy = exy - mx * my
        A1 = 2 * mx * my + SSIM_C1
        A2 = 2 * sxy + SSIM_C2
        B1 = mx * mx + my * my + SSIM_C1
        B2 = sx + sy + SSIM_C2
        F = 1.0 / (B1 * B2)
        s = A1 * A2 * F
        # Partials w.r.t. the windowed moments of x.
        d_mx = 2 * my * F * (A2 - A1) - 2 * mx * s * (1.0 / B1 - 1.0 / B2)
        d_ex2 = -s / B2
        d_exy = 2 * A1 * F
        g = (_corr_adjoint(d_mx, x.shape)
             + 2 * x * _corr_adjoint(d_ex2, x.shape)
             + y * _corr_adjoint(d_exy, x.shape))
        grad[:, :, c] = g
        count += s.size
    return grad / count


def l1(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def recon_loss(rendered: np.ndarray, ground_truth: np.ndarray,
               lambda_ssim: float) -> tuple[float, float, float]:
    """(l1, ssim, recon) with recon = (1 - lambda)*L1 + lambda*(1 - SSIM)."""
    l1v = l1(rendered, ground_truth)
    if lambda_ssim == 0.0:
        sv = ssim(rendered, ground_truth) if min(np.shape(rendered)[:2]) >= SSIM_WINDOW else float("nan")
        return l1v, sv, l1v
    sv = ssim(rendered, ground_truth)
    return l1v, sv, (1.0 - lambda_ssim) * l1v + lambda_ssim * (1.0 - sv)


def recon_loss_grad(rendered: np.ndarray, ground_truth: np.ndarray,
                    lambda_ssim: float) -> np.ndarray:
    """d recon / d rendered."""
    a, b = _check_pair(rendered, ground_truth)
    g = (1.0 - lambda_ssim) * np.sign(a - b) / a.size
    if lambda_ssim != 0.0:
        g = g - lambda_ssim * ssim_grad(a, b)
    return g.reshape(np.shape(rendered))


@dataclass
class LossTerms:
    l1: float
    ssim: float
    recon: float
    codebook_penalty: float
    total: float
    log_posterior_unnorm: float


def total_loss(recon: float, live_sh: int, live_sr: int,
               lambda_sh: float, lambda_sr: float,
               l1: float = float("nan"), ssim: float = float("nan")) -> LossTerms:
    """Reconstruction loss plus the linear codebook-size penalty."""
    if live_sh < 0 or live_sr < 0:
        raise ValueError("codebook sizes must be non-negative")
    penalty = lambda_sr * live_sr + lambda_sh * live_sh
    total = recon + penalty
    return LossTerms(l1=l1, ssim=ssim, recon=recon, codebook_penalty=penalty,
                     total=total, log_posterior_unnorm=-total)


def psnr(rendered: np.ndarray, ground_truth: np.ndarray,
         cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB; exact-zero MSE reports the cap."""
    a, b = _check_pair(rendered, ground_truth)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return -10.0 * math.log10(mse)
