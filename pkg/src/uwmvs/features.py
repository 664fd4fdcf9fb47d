"""Deterministic multi-scale feature pyramid and pixel-aligned feature handling.

The pyramid is a fixed Gaussian-derivative filter bank that produces the
same shapes a learned FPN would: (H/4, W/4, 32), (H/2, W/2, 16) and
(H, W, 8).  Derivatives are finite differences of a blurred image so that a
constant input yields derivative responses that are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import DomainError
from .geometry import bilinear_sample

LEVEL_CHANNELS = (32, 16, 8)
BLUR_SIGMA = 1.0
NORMALIZE_SIGMA = 2.0
NORMALIZE_EPS = 0.02
DERIVATIVE_SCALES = (1.0, 2.0)

_S = np.sqrt(0.5)
# (cos, sin) for 0, 45, 90 and 135 degrees, exact at the axis-aligned angles
_ORIENTATIONS = ((1.0, 0.0), (_S, _S), (0.0, 1.0), (-_S, _S))
_LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class FeaturePyramid:
    level1: np.ndarray  # (H/4, W/4, 32)
    level2: np.ndarray  # (H/2, W/2, 16)
    level3: np.ndarray  # (H, W, 8)
    pad: tuple = (0, 0, 0, 0)  # top, bottom, left, right padding applied to the input
    images: tuple = field(default=(), repr=False)  # the per-level RGB images

    def level(self, index: int) -> np.ndarray:
        return (self.level1, self.level2, self.level3)[index - 1]


def _derivatives(channel: np.ndarray, scale: float):
    b = ndimage.gaussian_filter(channel, scale, mode="reflect")
    dy, dx = np.gradient(b)
    dyy, dyx = np.gradient(dy)
    dxy, dxx = np.gradient(dx)
    dxy = 0.5 * (dxy + dyx)
    first = [c * dx + s * dy for c, s in _ORIENTATIONS]
    second = [c * c * dxx + 2 * c * s * dxy + s * s * dyy for c, s in _ORIENTATIONS]
    # scale-normalised responses
    return [scale * f for f in first], [scale * scale * f for f in second], (scale * dx, scale * dy)


def filter_bank(image: np.ndarray, channels: int) -> np.ndarray:
    """Filter-bank response of one (h, w, 3) image truncated to ``channels``.

    Channel order: R, G, B, luminance; luminance first-order (4 orientations)
    and second-order (4 orientations) at scale 1; the same at scale 2;
    per-colour x/y first derivatives at scale 1 then scale 2.
    """
    img = np.asarray(image, dtype=np.float64)
    lum = img @ _LUMA
    out = [img[..., 0], img[..., 1], img[..., 2], lum]
    colour = []
    for s in DERIVATIVE_SCALES:
        first, second, _ = _derivatives(lum, s)
        out.extend(first)
        out.extend(second)
        for c in range(3):
            colour.extend(_derivatives(img[..., c], s)[2])
    out.extend(colour)
    if channels > len(out):
        raise DomainError(f"filter bank has only {len(out)} channels")
    return np.stack(out[:channels], axis=-1).astype(np.float32)


def downsample(image: np.ndarray) -> np.ndarray:
    """Gaussian blur (sigma 1) followed by 2x decimation keeping even pixels."""
    img = np.asarray(image, dtype=np.float64)
    sig = (BLUR_SIGMA, BLUR_SIGMA) + (0,) * (img.ndim - 2)
    return ndimage.gaussian_filter(img, sig, mode="reflect")[::2, ::2]


def local_normalize(image: np.ndarray, sigma: float = NORMALIZE_SIGMA, eps: float = NORMALIZE_EPS) -> np.ndarray:
    """Per-channel local contrast normalisation.

    Subtracting a Gaussian-weighted local mean and dividing by the local
    standard deviation cancels any per-channel affine intensity change that
    is roughly constant over the window, which is what the water column does
    to a surface seen from different distances.
    """
    img = np.asarray(image, dtype=np.float64)
    sig = (sigma, sigma) + (0,) * (img.ndim - 2)
    d = img - ndimage.gaussian_filter(img, sig, mode="reflect")
    sd = np.sqrt(ndimage.gaussian_filter(d * d, sig, mode="reflect") + eps * eps)
    return d / sd


def pad_to_multiple(image: np.ndarray, multiple: int = 4):
    h, w = image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    pad = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if ph or pw:
        widths = ((pad[0], pad[1]), (pad[2], pad[3])) + ((0, 0),) * (image.ndim - 2)
        image = np.pad(image, widths, mode="symmetric")
    return image, pad


def extract_pyramid(image: np.ndarray, normalize: bool = True) -> FeaturePyramid:
    """Three-level feature pyramid of an RGB image.

    With ``normalize`` the filter bank runs on locally contrast-normalised
    images, so matching costs ignore the distance-dependent colour shift of
    the medium.  ``images`` always holds the unnormalised RGB levels.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DomainError(f"expected an (H, W, 3) image, got shape {img.shape}")
    img, pad = pad_to_multiple(img, 4)
    im3 = img
    im2 = downsample(im3)
    im1 = downsample(im2)
    prep = local_normalize if normalize else np.asarray
    return FeaturePyramid(
        level1=filter_bank(prep(im1), LEVEL_CHANNELS[0]),
        level2=filter_bank(prep(im2), LEVEL_CHANNELS[1]),
        level3=filter_bank(prep(im3), LEVEL_CHANNELS[2]),
        pad=pad,
        images=(im1.astype(np.float32), im2.astype(np.float32), im3.astype(np.float32)),
    )


def sample_features(feature_map: np.ndarray, coords) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples of an (h, w, F) map at (..., 2) ``(x, y)`` coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    return bilinear_sample(feature_map, coords[..., 0], coords[..., 1])


@dataclass
class PixelAlignedFeature:
    """Per-view features sampled for a batch of target pixels."""

    feature: np.ndarray  # (P, F)
    ray_delta: np.ndarray  # (P, 4): d_src - d_tgt, d_src . d_tgt
    valid: np.ndarray  # (P,)

    @property
    def augmented(self) -> np.ndarray:
        return np.concatenate([self.feature, self.ray_delta.astype(np.float32)], axis=-1)


def ray_delta(d_src: np.ndarray, d_tgt: np.ndarray) -> np.ndarray:
    dot = np.clip(np.sum(d_src * d_tgt, axis=-1, keepdims=True), -1.0, 1.0)
    return np.concatenate([d_src - d_tgt, dot], axis=-1)


def pool_views(features: list[PixelAlignedFeature]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate mean and population variance over valid views.

    Returns ``(f_img, pixel_valid)``; pixels with no valid view get zeros
    and ``pixel_valid = False``.
    """
    if not features:
        raise DomainError("pool_views needs at least one view")
    stack = np.stack([f.augmented for f in features]).astype(np.float64)  # N,P,F
    valid = np.stack([f.valid for f in features]).astype(np.float64)[..., None]
    count = valid.sum(axis=0)
    denom = np.maximum(count, 1.0)
    mean = (stack * valid).sum(axis=0) / denom
    var = (((stack - mean) ** 2) * valid).sum(axis=0) / denom
    pooled = np.concatenate([mean, var], axis=-1).astype(np.float32)
    return pooled, count[..., 0] > 0


def average_volumes(volumes, masks) -> np.ndarray:
    """Mean over views of (D, h, w, F) volumes, counting only unmasked samples."""
    vol = np.zeros_like(np.asarray(volumes[0], dtype=np.float64))
    cnt = np.zeros(vol.shape[:-1])
    for v, m in zip(volumes, masks):
        vol += np.asarray(v, dtype=np.float64) * m[..., None]
        cnt += m
    return (vol / np.maximum(cnt, 1.0)[..., None]).astype(np.float32)


def grid_features(volume: np.ndarray, planes: np.ndarray, coords, depth) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear lookup of a view-averaged (D, h, w, F) volume.

    ``planes`` are the hypothesis depths, (D,) or per pixel (D, h, w).
    ``coords`` are (..., 2) volume-grid ``(x, y)`` positions and ``depth``
    the matching depths.  The depth coordinate is the fractional plane index
    between the two bracketing (bilinearly interpolated) planes; depths
    outside the plane range clamp to the boundary plane.  Returns
    ``(values, in_range)``.
    """
    volume = np.asarray(volume)
    D, h, w, F = volume.shape
    coords = np.asarray(coords, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = np.clip(coords[..., 0], 0, w - 1)
    y = np.clip(coords[..., 1], 0, h - 1)
    flat = np.moveaxis(volume, 0, 2).reshape(h, w, D * F)
    samples = bilinear_sample(flat, x, y, dtype=np.float64)[0].reshape(x.shape + (D, F))
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 1:
        lp = np.broadcast_to(planes, x.shape + (D,))
    else:
        lp = bilinear_sample(np.moveaxis(planes, 0, -1), x, y, dtype=np.float64)[0]
    k = np.clip((lp <= depth[..., None]).sum(axis=-1) - 1, 0, D - 2)
    lo = np.take_along_axis(lp, k[..., None], -1)[..., 0]
    hi = np.take_along_axis(lp, (k + 1)[..., None], -1)[..., 0]
    frac = (depth - lo) / np.maximum(hi - lo, 1e-12)
    in_range = (frac >= -1e-9) & (frac <= 1 + 1e-9)
    frac = np.clip(frac, 0.0, 1.0)[..., None]
    v0 = np.take_along_axis(samples, k[..., None, None], -2)[..., 0, :]
    v1 = np.take_along_axis(samples, (k + 1)[..., None, None], -2)[..., 0, :]
    return ((1 - frac) * v0 + frac * v1).astype(np.float32), in_range

