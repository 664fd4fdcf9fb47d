"""Photometric training losses on autodiff tensors.

Images are (H, W, C) tensors in [0, 1].  All reductions are means over
elements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DomainError
from .imaging.metrics import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, gaussian_window


@dataclass
class LossConfig:
    lambda_loss: float = 0.2
    epsilon: float = 1e-3
    use_l1_variant: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lambda_loss <= 1.0:
            raise DomainError(f"lambda_loss must lie in [0, 1], got {self.lambda_loss}")
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")


def _tensors(pred, truth):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    truth = truth if isinstance(truth, Tensor) else Tensor(truth, dtype=pred.dtype)
    if pred.shape != truth.shape:
        raise DomainError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
    return pred, truth


def recon_loss(pred, truth, epsilon: float = 1e-3) -> Tensor:
    """Relative squared error ``((pred - truth) / (sg(pred) + eps))^2``, averaged.

    The detached denominator is clamped at zero so a slightly negative
    prediction cannot divide by ~0.
    """
    pred, truth = _tensors(pred, truth)
    denom = np.maximum(pred.data, 0.0) + epsilon
    rel = (pred - truth) / Tensor(denom.astype(pred.dtype))
    return ad.mean(rel * rel)


def l1_loss(pred, truth) -> Tensor:
    pred, truth = _tensors(pred, truth)
    return ad.mean(ad.abs(pred - truth))


def _window_kernel(dtype) -> np.ndarray:
    g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    return np.outer(g, g).astype(dtype)[None, None]


def ssim_tensor(pred, truth, data_range: float = 1.0) -> Tensor:
    """Mean SSIM, zero-padded 11x11 Gaussian window, as a differentiable tensor."""
    pred, truth = _tensors(pred, truth)
    if pred.ndim == 2:
        pred, truth = pred.reshape(*pred.shape, 1), truth.reshape(*truth.shape, 1)
    h, w, c = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DomainError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    k = _window_kernel(pred.dtype)
    pad = SSIM_WINDOW // 2
    # channels become the batch axis: (C, 1, H, W)
    x = pred.transpose(2, 0, 1).reshape(c, 1, h, w)
    y = truth.transpose(2, 0, 1).reshape(c, 1, h, w)

    def blur(t):
        return ad.conv2d(t, k, padding=pad)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    mxx, myy, mxy = mx * mx, my * my, mx * my
    sxx = blur(x * x) - mxx
    syy = blur(y * y) - myy
    sxy = blur(x * y) - mxy
    num = (2.0 * mxy + c1) * (2.0 * sxy + c2)
    den = (mxx + myy + c1) * (sxx + syy + c2)
    return ad.mean(num / den)


def dssim_loss(pred, truth) -> Tensor:
    return (1.0 - ssim_tensor(pred, truth)) * 0.5


def total_loss(pred, truth, cfg: LossConfig | None = None, parts: dict | None = None, mask=None) -> Tensor:
    """``(1 - lam) * recon + lam * dssim`` (recon replaced by L1 in the variant).

    ``mask`` (H, W) marks pixels that take part; elsewhere the prediction is
    replaced by the truth, so they add no error and no gradient.  When
    ``parts`` is a dict it receives the float value of each term.
    """
    cfg = cfg or LossConfig()
    if mask is not None:
        pred, truth = _tensors(pred, truth)
        m = np.asarray(mask, dtype=pred.dtype)
        if m.shape != pred.shape[:2]:
            raise DomainError(f"mask shape {m.shape} does not match image {pred.shape[:2]}")
        m = m.reshape(m.shape + (1,) * (pred.ndim - 2))
        pred = pred * m + truth.data * (1.0 - m)
    first = l1_loss(pred, truth) if cfg.use_l1_variant else recon_loss(pred, truth, cfg.epsilon)
    lam = cfg.lambda_loss
    ds = dssim_loss(pred, truth)
    out = first if lam == 0.0 else first * (1.0 - lam) + ds * lam
    if parts is not None:
        parts["recon"] = float(first.data)
        parts["dssim"] = float(ds.data)
        parts["total"] = float(out.data)
    return out
