"""Water-medium physics: direction encoding, the medium subnet, and the imaging equation.

A pixel seen through water at camera-frame depth ``z`` is modelled per
colour channel as::

    c_hat = c_clr * exp(-sigma_atten * z) + c_bs * (1 - exp(-sigma_bs * z))

The medium subnet maps a spherical-harmonic encoding of the viewing ray to
``(sigma_atten, sigma_bs, c_bs)``.  A small colour MLP scores each source
view; the softmax of those scores blends restored source colours into the
target's clear image, which is then re-immersed in water.

Every differentiable function here accepts numpy arrays or autodiff
tensors; numpy inputs are wrapped in non-trainable tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DomainError
from .optim import ParameterSet

SH_LEVEL = 4
MEDIUM_HIDDEN = (128, 64)
COLOR_HIDDEN = 24
RESTORE_GUARD = 1e-8
MAX_SH_LEVEL = 5

# -- spherical harmonics -------------------------------------------------------
_PI = np.pi


def _sh_terms(x, y, z):
    """Real SH (no Condon-Shortley phase), degrees 0..4, ordered m = -l..l."""
    c0 = 0.5 * np.sqrt(1 / _PI)
    c1 = np.sqrt(3 / (4 * _PI))
    zz = z * z
    one = np.ones_like(x)
    deg = [
        [c0 * one],
        [c1 * y, c1 * z, c1 * x],
        [
            0.5 * np.sqrt(15 / _PI) * x * y,
            0.5 * np.sqrt(15 / _PI) * y * z,
            0.25 * np.sqrt(5 / _PI) * (3 * zz - 1),
            0.5 * np.sqrt(15 / _PI) * x * z,
            0.25 * np.sqrt(15 / _PI) * (x * x - y * y),
        ],
        [
            0.25 * np.sqrt(35 / (2 * _PI)) * y * (3 * x * x - y * y),
            0.5 * np.sqrt(105 / _PI) * x * y * z,
            0.25 * np.sqrt(21 / (2 * _PI)) * y * (5 * zz - 1),
            0.25 * np.sqrt(7 / _PI) * z * (5 * zz - 3),
            0.25 * np.sqrt(21 / (2 * _PI)) * x * (5 * zz - 1),
            0.25 * np.sqrt(105 / _PI) * z * (x * x - y * y),
            0.25 * np.sqrt(35 / (2 * _PI)) * x * (x * x - 3 * y * y),
        ],
        [
            0.75 * np.sqrt(35 / _PI) * x * y * (x * x - y * y),
            0.75 * np.sqrt(35 / (2 * _PI)) * y * z * (3 * x * x - y * y),
            0.75 * np.sqrt(5 / _PI) * x * y * (7 * zz - 1),
            0.75 * np.sqrt(5 / (2 * _PI)) * y * z * (7 * zz - 3),
            (3 / 16) * np.sqrt(1 / _PI) * (35 * zz * zz - 30 * zz + 3),
            0.75 * np.sqrt(5 / (2 * _PI)) * x * z * (7 * zz - 3),
            (3 / 8) * np.sqrt(5 / _PI) * (x * x - y * y) * (7 * zz - 1),
            0.75 * np.sqrt(35 / (2 * _PI)) * x * z * (x * x - 3 * y * y),
            (3 / 16) * np.sqrt(35 / _PI) * (x * x * (x * x - 3 * y * y) - y * y * (3 * x * x - y * y)),
        ],
    ]
    return deg


def sh_encode(directions, level: int = SH_LEVEL) -> np.ndarray:
    """Real spherical-harmonic basis of unit ``directions`` for degrees 0..level-1.

    Returns ``(..., level**2)`` values in float64.
    """
    if not 1 <= int(level) <= MAX_SH_LEVEL:
        raise DomainError(f"SH level must be in 1..{MAX_SH_LEVEL}, got {level}")
    d = np.asarray(directions, dtype=np.float64)
    if d.shape[-1] != 3:
        raise DomainError(f"directions need a trailing axis of 3, got {d.shape}")
    norm = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise DomainError("directions must be unit vectors (norm within 1e-6 of 1)")
    terms = _sh_terms(d[..., 0], d[..., 1], d[..., 2])
    return np.stack([t for deg in terms[: int(level)] for t in deg], axis=-1)


# -- small dense networks -------------------------------------------------------
@dataclass
class MLPWeights:
    """Dense layers ``[(W, b), ...]`` with ReLU between them (none after the last)."""

    layers: list

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, dtype=np.float32) -> "MLPWeights":
        """Uniform in [-k, k] with k = 1/sqrt(fan_in); zero biases."""
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            k = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-k, k, size=(fan_in, fan_out)).astype(dtype)
            layers.append((W, np.zeros(fan_out, dtype=dtype)))
        return cls(layers)

    @classmethod
    def zeros(cls, sizes, dtype=np.float32) -> "MLPWeights":
        return cls([(np.zeros((a, b), dtype=dtype), np.zeros(b, dtype=dtype)) for a, b in zip(sizes[:-1], sizes[1:])])

    @property
    def sizes(self) -> tuple:
        return (self.layers[0][0].shape[0],) + tuple(W.shape[1] for W, _ in self.layers)

    def named_arrays(self, prefix: str) -> dict:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"{prefix}.W{i}"] = np.asarray(W.data if isinstance(W, Tensor) else W)
            out[f"{prefix}.b{i}"] = np.asarray(b.data if isinstance(b, Tensor) else b)
        return out

    @classmethod
    def from_named(cls, arrays, prefix: str) -> "MLPWeights":
        layers = []
        i = 0
        while f"{prefix}.W{i}" in arrays:
            layers.append((arrays[f"{prefix}.W{i}"], arrays[f"{prefix}.b{i}"]))
            i += 1
        if not layers:
            raise DomainError(f"no layers named {prefix}.W0 ...")
        return cls(layers)

    def register(self, params: ParameterSet, prefix: str) -> "MLPWeights":
        """Add the layers to ``params`` and return a copy that holds the trainable tensors."""
        layers = []
        for i, (W, b) in enumerate(self.layers):
            layers.append((params.add(f"{prefix}.W{i}", W), params.add(f"{prefix}.b{i}", b)))
        return MLPWeights(layers)


def mlp_forward(x, weights: MLPWeights) -> Tensor:
    """Apply the MLP to the trailing axis of ``x`` (any leading shape)."""
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=_dtype_of(weights))
    lead = x.shape[:-1]
    if x.shape[-1] != weights.sizes[0]:
        raise DomainError(f"MLP expects {weights.sizes[0]} inputs, got {x.shape[-1]}")
    h = x.reshape(-1, x.shape[-1])
    last = len(weights.layers) - 1
    for i, (W, b) in enumerate(weights.layers):
        h = ad.matmul(h, W if isinstance(W, Tensor) else Tensor(W)) + (b if isinstance(b, Tensor) else Tensor(b))
        if i < last:
            h = ad.relu(h)
    return h.reshape(*lead, h.shape[-1])


def _dtype_of(weights: MLPWeights):
    W = weights.layers[0][0]
    return W.dtype


# -- medium subnet -------------------------------------------------------------
@dataclass
class MediumParams:
    sigma_atten: np.ndarray  # (..., 3) >= 0
    sigma_bs: np.ndarray  # (..., 3) >= 0
    c_bs: np.ndarray  # (..., 3) in (0, 1)

    @classmethod
    def constant(cls, sigma_atten, sigma_bs, c_bs, shape=()) -> "MediumParams":
        def full(v):
            return np.broadcast_to(np.asarray(v, dtype=np.float64), tuple(shape) + (3,)).copy()

        return cls(full(sigma_atten), full(sigma_bs), full(c_bs))

    def means(self) -> dict:
        return {
            "sigma_atten": self.sigma_atten.reshape(-1, 3).mean(axis=0),
            "sigma_bs": self.sigma_bs.reshape(-1, 3).mean(axis=0),
            "c_bs": self.c_bs.reshape(-1, 3).mean(axis=0),
        }


def init_medium_weights(rng: np.random.Generator, level: int = SH_LEVEL, dtype=np.float32) -> MLPWeights:
    return MLPWeights.init((level * level,) + MEDIUM_HIDDEN + (9,), rng, dtype)


def medium_heads(encoded, weights: MLPWeights):
    """Tensor form of the subnet: returns ``(sigma_atten, sigma_bs, c_bs)`` tensors."""
    s = mlp_forward(encoded, weights)
    if s.shape[-1] != 9:
        raise DomainError(f"medium decoder must output 9 values, got {s.shape[-1]}")
    return ad.softplus(s[..., 0:3]), ad.softplus(s[..., 3:6]), ad.sigmoid(s[..., 6:9])


def medium_forward(encoded, weights: MLPWeights) -> MediumParams:
    """Per-pixel medium parameters from SH-encoded directions."""
    encoded = np.asarray(encoded.data if isinstance(encoded, Tensor) else encoded)
    if encoded.shape[-1] != weights.sizes[0]:
        raise DomainError(f"encoding has {encoded.shape[-1]} channels, subnet expects {weights.sizes[0]}")
    sa, sb, cb = medium_heads(encoded.astype(_dtype_of(weights)), weights)
    return MediumParams(sa.data, sb.data, cb.data)


# -- imaging equation (numpy, float64) -----------------------------------------
def _check_depth(z):
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0):
        raise DomainError("depth must be non-negative")
    if not np.all(np.isfinite(z)):
        raise DomainError("depth must be finite")
    return z


def _zcol(z, like):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == np.ndim(like) - 1:
        z = z[..., None]
    return z


def render_pixel(c_clr, params: MediumParams, z) -> np.ndarray:
    """Underwater colour ``c_clr * exp(-sa z) + c_bs * (1 - exp(-sb z))``.

    ``z`` is either per pixel (broadcast over the colour axis) or per channel.
    """
    z = _zcol(_check_depth(z), c_clr)
    c = np.asarray(c_clr, dtype=np.float64)
    att = np.exp(-np.asarray(params.sigma_atten, dtype=np.float64) * z)
    bs = np.asarray(params.c_bs, dtype=np.float64) * -np.expm1(-np.asarray(params.sigma_bs, dtype=np.float64) * z)
    return c * att + bs


@dataclass
class Restoration:
    clear: np.ndarray  # clamped to [0, 1]
    raw: np.ndarray  # unclamped inversion
    ill_conditioned: np.ndarray  # bool, exp(-sigma_atten z) below the guard

    def __iter__(self):
        return iter((self.clear, self.raw, self.ill_conditioned))


def restore_pixel(c_hat, params: MediumParams, z) -> Restoration:
    """Invert the imaging equation for the clear colour.

    Where ``exp(-sigma_atten z)`` falls below 1e-8 the pixel is flagged and its
    transmission is clamped to the guard value instead of raising.
    """
    z = _zcol(_check_depth(z), c_hat)
    c = np.asarray(c_hat, dtype=np.float64)
    att = np.exp(-np.asarray(params.sigma_atten, dtype=np.float64) * z)
    bs = np.asarray(params.c_bs, dtype=np.float64) * -np.expm1(-np.asarray(params.sigma_bs, dtype=np.float64) * z)
    bad = att < RESTORE_GUARD
    raw = (c - bs) / np.maximum(att, RESTORE_GUARD)
    bad = np.broadcast_to(bad, raw.shape)
    return Restoration(np.clip(raw, 0.0, 1.0), raw, bad.any(axis=-1) if raw.ndim else bad)


def compose_underwater(c_tar_clr, params: MediumParams, depth, eq19_compat: bool = False):
    """Re-immerse a clear image: returns ``(I_hat, I_atten, I_bs)``.

    With ``eq19_compat`` the backscatter exponent uses ``sigma_atten`` instead
    of ``sigma_bs``.
    """
    z = _zcol(_check_depth(depth), c_tar_clr)
    c = np.asarray(c_tar_clr, dtype=np.float64)
    sa = np.asarray(params.sigma_atten, dtype=np.float64)
    sb = sa if eq19_compat else np.asarray(params.sigma_bs, dtype=np.float64)
    i_att = c * np.exp(-sa * z)
    i_bs = np.asarray(params.c_bs, dtype=np.float64) * -np.expm1(-sb * z)
    return i_att + i_bs, i_att, i_bs


# -- tensor forms used in training ---------------------------------------------
def render_tensor(c_clr, sa, sb, cb, z, eq19_compat: bool = False):
    """Differentiable ``(I_hat, I_atten, I_bs)``; ``z`` is a constant array (..., 1)."""
    z = np.asarray(z)
    i_att = c_clr * ad.exp(-(sa * z))
    i_bs = cb * (1.0 - ad.exp(-((sa if eq19_compat else sb) * z)))
    return i_att + i_bs, i_att, i_bs


def restore_tensor(c_hat, sa, sb, cb, z):
    """Differentiable raw restoration ``(c_hat - c_bs (1 - e^{-sb z})) * e^{sa z}``."""
    z = np.asarray(z)
    return (c_hat - cb * (1.0 - ad.exp(-(sb * z)))) * ad.exp(sa * z)


# -- colour blending -------------------------------------------------------------
def init_color_weights(rng: np.random.Generator, in_dim: int, dtype=np.float32) -> MLPWeights:
    return MLPWeights.init((in_dim, COLOR_HIDDEN, 1), rng, dtype)


def blend_logits(f_img, f_grid, f_views, weights: MLPWeights) -> Tensor:
    """Per-view scalar scores, shape (N, P).

    ``f_img`` (P, A) and ``f_grid`` (P, G) are shared by all views; ``f_views``
    is (N, P, F).
    """
    f_views = f_views if isinstance(f_views, Tensor) else Tensor(f_views, dtype=_dtype_of(weights))
    n, p = f_views.shape[:2]
    shared = np.concatenate([_np(f_img), _np(f_grid)], axis=-1).astype(_dtype_of(weights))
    if shared.shape[0] != p:
        raise DomainError(f"shared features cover {shared.shape[0]} pixels, view features {p}")
    shared = Tensor(np.broadcast_to(shared, (n,) + shared.shape))
    x = ad.concat([shared, f_views], axis=-1)
    return mlp_forward(x, weights)[..., 0]


def _np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def softmax_views(logits, valid=None) -> Tensor:
    """Softmax over the view axis (0); invalid views get zero weight.

    A pixel with no valid view falls back to uniform weights.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        none = ~valid.any(axis=0, keepdims=True)
        keep = valid | none
        penalty = np.where(keep, 0.0, -1e4).astype(logits.dtype)
        logits = logits + penalty
    return ad.softmax(logits, axis=0)


def blend_weights(f_img, f_grid, f_views, weights: MLPWeights, valid=None) -> np.ndarray:
    """Blend weights (N, P) that sum to one over views."""
    return softmax_views(blend_logits(f_img, f_grid, f_views, weights), valid).data


def blend_clear(clear_src, w):
    """Weighted sum over views: clear_src (N, ..., 3), w (N, ...)."""
    if isinstance(clear_src, Tensor) or isinstance(w, Tensor):
        w = w if isinstance(w, Tensor) else Tensor(w)
        return ad.sum(clear_src * w.reshape(*w.shape, 1), axis=0)
    clear_src = np.asarray(clear_src, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if clear_src.shape[:-1] != w.shape:
        raise DomainError(f"weights {w.shape} do not match images {clear_src.shape}")
    return (clear_src * w[..., None]).sum(axis=0)
