"""Image-space objective and its gradients.

All image terms take ``(R, I)``: the rendering and the target, both ``(n, n)``
arrays in [0, 1]. Functions returning gradients give ``dterm/dR``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

from .errors import PerceptualPluginError, ZeroMassError
from .ifs_core import FractalCode, svd_factors

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    mse: float = 10.0
    ssim: float = 1.0
    lpips: float = 2.0
    reg: float = 1e-2
    cond: float = 10.0

    def __post_init__(self):
        for name in ("mse", "ssim", "lpips", "reg", "cond"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name!r} must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    mse_ms: float
    dssim: float
    perceptual: float
    reg: float


PerceptualPlugin = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]


def _check_pair(R, I):
    R = np.asarray(R, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    if R.shape != I.shape:
        raise ValueError(f"shape mismatch: {R.shape} vs {I.shape}")
    return R, I


# -- pyramid ---------------------------------------------------------------

def _pool2(x):
    h, w = x.shape
    return x.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def build_pyramid(img) -> list[np.ndarray]:
    """Levels from the input down to 1x1 by repeated 2x2 average pooling."""
    img = np.asarray(img, dtype=np.float64)
    n = img.shape[0]
    if img.ndim != 2 or img.shape[1] != n or n < 1 or n & (n - 1):
        raise ValueError(f"pyramid needs a square power-of-two image, got {img.shape}")
    levels = [img]
    while levels[-1].shape[0] > 1:
        levels.append(_pool2(levels[-1]))
    return levels


def multiscale_mse(R, I, mip: bool = True) -> tuple[float, np.ndarray]:
    """Sum over pyramid levels of the per-level pixel-mean squared error.

    With ``mip=False`` only the full-resolution level is used.
    """
    R, I = _check_pair(R, I)
    if not mip:
        diff = R - I
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    pr, pi = build_pyramid(R), build_pyramid(I)
    total = 0.0
    grad = None
    for lr, li in zip(reversed(pr), reversed(pi)):
        diff = lr - li
        total += float(np.mean(diff * diff))
        g = 2.0 * diff / diff.size
        if grad is not None:
            # adjoint of 2x2 mean pooling
            g = g + np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) * 0.25
        grad = g
    return total, grad


# -- SSIM ------------------------------------------------------------------

def _gauss_window():
    k = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(k * k) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


_WIN = _gauss_window()
_PAD = SSIM_WINDOW // 2


def _filt(x):
    y = correlate1d(x, _WIN, axis=0, mode="constant")
    y = correlate1d(y, _WIN, axis=1, mode="constant")
    return y[_PAD:-_PAD, _PAD:-_PAD]


def _filt_adjoint(g, shape):
    full = np.zeros(shape)
    full[_PAD:-_PAD, _PAD:-_PAD] = g
    full = correlate1d(full, _WIN, axis=0, mode="constant")
    return correlate1d(full, _WIN, axis=1, mode="constant")


def _ssim_parts(R, I):
    if min(R.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {R.shape}")
    mx, my = _filt(R), _filt(I)
    qx, qy, rxy = _filt(R * R), _filt(I * I), _filt(R * I)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (rxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (qx - mx * mx) + (qy - my * my) + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim(R, I) -> float:
    """Mean SSIM over all positions where the 11x11 Gaussian window fits."""
    R, I = _check_pair(R, I)
    _, _, a1, a2, b1, b2 = _ssim_parts(R, I)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def dssim(R, I) -> tuple[float, np.ndarray]:
    R, I = _check_pair(R, I)
    mx, my, a1, a2, b1, b2 = _ssim_parts(R, I)
    den = b1 * b2
    S = a1 * a2 / den
    value = float((1.0 - S.mean()) / 2.0)
    w = -0.5 / S.size
    d_mx = (2 * my * a2 - 2 * my * a1) / den - S * 2 * mx / b1 + S * 2 * mx / b2
    d_qx = -S / b2
    d_rxy = 2 * a1 / den
    grad = (_filt_adjoint(w * d_mx, R.shape)
            + 2 * R * _filt_adjoint(w * d_qx, R.shape)
            + I * _filt_adjoint(w * d_rxy, R.shape))
    return value, grad


# -- regulariser -----------------------------------------------------------

def regularizer(sigma, b, w_cond: float = 10.0) -> tuple[float, np.ndarray, np.ndarray]:
    """Singular-value, offset and condition-number penalty.

    Returns:
        ``(value, d/dsigma, d/db)`` with gradient shapes matching ``sigma`` and ``b``.
    """
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    first = sigma[:, 0] >= sigma[:, 1]
    hi = np.where(first, sigma[:, 0], sigma[:, 1])
    lo = np.where(first, sigma[:, 1], sigma[:, 0])
    ratio = (hi + 1.0) / (lo + 1.0)
    value = float(np.sum(sigma ** 2) + np.sum(b ** 2) + w_cond * np.sum((ratio - 1.0) ** 2))
    d_hi = 2.0 * w_cond * (ratio - 1.0) / (lo + 1.0)
    d_lo = -2.0 * w_cond * (ratio - 1.0) * (hi + 1.0) / (lo + 1.0) ** 2
    dsigma = 2.0 * sigma
    dsigma[:, 0] += np.where(first, d_hi, d_lo)
    dsigma[:, 1] += np.where(first, d_lo, d_hi)
    return value, dsigma, 2.0 * b


# -- moments ---------------------------------------------------------------

def _moment_basis(n, order):
    c = (np.arange(n) + 0.5) / n
    pairs = [(p, q) for p in range(order + 1) for q in range(order + 1 - p) if p + q > 0]
    return pairs, c


def image_moments(img, order: int = 4) -> np.ndarray:
    """Mass-normalised raw moments ``m_pq`` for ``0 < p + q <= order``.

    ``p`` is the power of the column coordinate, ``q`` of the row coordinate,
    both measured at pixel centres in [0, 1].
    """
    img = np.asarray(img, dtype=np.float64)
    mass = img.sum()
    if not mass > 0:
        raise ZeroMassError("image has zero total intensity")
    pairs, c = _moment_basis(img.shape[0], order)
    cx = (np.arange(img.shape[1]) + 0.5) / img.shape[1]
    return np.array([np.sum(img * np.outer(c ** q, cx ** p)) / mass for p, q in pairs])


def moment_loss(R, I, order: int = 4) -> tuple[float, np.ndarray]:
    R, I = _check_pair(R, I)
    mr, mi = image_moments(R, order), image_moments(I, order)
    diff = mr - mi
    pairs, c = _moment_basis(R.shape[0], order)
    cx = (np.arange(R.shape[1]) + 0.5) / R.shape[1]
    mass = R.sum()
    grad = np.zeros_like(R)
    for (p, q), d, m in zip(pairs, diff, mr):
        grad += 2.0 * d * (np.outer(c ** q, cx ** p) - m) / mass
    return float(np.sum(diff ** 2)), grad


# -- total -----------------------------------------------------------------

def _sigma_b(code):
    if isinstance(code, FractalCode):
        _, _, sigma, _, b = svd_factors(code.params)
        return sigma, b
    sigma, b = code
    return np.asarray(sigma, dtype=np.float64).reshape(-1, 2), np.asarray(b, dtype=np.float64).reshape(-1, 2)


def total_loss(R, I, code, weights: LossWeights = LossWeights(), perceptual: PerceptualPlugin | None = None,
               mip: bool = True):
    """Weighted sum of multi-scale MSE, D-SSIM, perceptual slot and regulariser.

    Args:
        code: a :class:`FractalCode` or a ``(sigma, b)`` pair of materialised values.

    Returns:
        ``(LossBreakdown, dL/dR, dL/dsigma, dL/db)``.
    """
    R, I = _check_pair(R, I)
    sigma, b = _sigma_b(code)
    mse, g_mse = multiscale_mse(R, I, mip=mip)
    ds, g_ssim = dssim(R, I)
    grad_r = weights.mse * g_mse + weights.ssim * g_ssim
    perc = 0.0
    if perceptual is not None:
        try:
            perc, g = perceptual(R, I)
            perc = float(perc)
            g = np.asarray(g, dtype=np.float64)
        except Exception as exc:
            raise PerceptualPluginError(f"perceptual plugin failed: {exc}") from exc
        if perc < 0 or g.shape != R.shape:
            raise PerceptualPluginError("perceptual plugin must return a value >= 0 and a gradient shaped like R")
        grad_r += weights.lpips * g
    reg, dsig, db = regularizer(sigma, b, weights.cond)
    total = weights.mse * mse + weights.ssim * ds + weights.lpips * perc + weights.reg * reg
    breakdown = LossBreakdown(total=total, mse_ms=mse, dssim=ds, perceptual=perc, reg=reg)
    return breakdown, grad_r, weights.reg * dsig, weights.reg * db


def mse(R, I) -> float:
    R, I = _check_pair(R, I)
    return float(np.mean((R - I) ** 2))
