"""Plane-sweep cost volumes, probabilistic depth regression and the two-stage cascade."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import DomainError
from .features import FeaturePyramid, average_volumes, extract_pyramid
from .geometry import (
    CameraIntrinsics,
    Viewpoint,
    bilinear_sample,
    homography,
    pixel_grid,
    warp_map,
    warp_map_depth,
)

DEPTH_EPSILON = 1e-3


@dataclass
class DepthHypotheses:
    """Depth planes, either shared (D,) or per pixel (D, h, w)."""

    planes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.planes, dtype=np.float64)
        if p.shape[0] < 2:
            raise DomainError("need at least two depth planes")
        if np.any(p <= 0):
            raise DomainError("depth planes must be positive")
        if np.any(np.diff(p, axis=0) <= 0):
            raise DomainError("depth planes must be strictly increasing")
        self.planes = p

    @property
    def D(self) -> int:
        return self.planes.shape[0]

    @property
    def per_pixel(self) -> bool:
        return self.planes.ndim == 3

    def expanded(self, shape) -> np.ndarray:
        """(D, h, w) view of the planes."""
        if self.per_pixel:
            return self.planes
        return np.broadcast_to(self.planes[:, None, None], (self.D,) + tuple(shape))


@dataclass
class CostVolume:
    values: np.ndarray  # (D, h, w, F) variance features
    count: np.ndarray  # (D, h, w) number of views that contributed

    @property
    def flagged(self) -> np.ndarray:
        """Voxels seen by fewer than two views."""
        return self.count < 2


@dataclass
class DepthMap:
    depth: np.ndarray  # (h, w)
    sigma: np.ndarray  # (h, w)
    interval: np.ndarray  # (h, w, 2)
    valid: np.ndarray  # (h, w) bool
    spacing: np.ndarray | None = None  # local hypothesis spacing at the estimate
    probability: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.depth.shape


def uniform_hypotheses(near: float, far: float, D: int) -> DepthHypotheses:
    """``D`` planes uniformly spaced in inverse depth, endpoints exact."""
    if not (0 < near < far):
        raise DomainError(f"need 0 < near < far, got near={near}, far={far}")
    if D < 2:
        raise DomainError(f"need at least two planes, got {D}")
    inv = np.linspace(1.0 / near, 1.0 / far, D)
    planes = 1.0 / inv
    planes[0], planes[-1] = near, far
    return DepthHypotheses(planes)


def local_spacing(planes: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Gap between the two planes bracketing ``depth``; planes is (D, h, w)."""
    D = planes.shape[0]
    k = np.clip((planes <= depth[None]).sum(axis=0) - 1, 0, D - 2)
    lo = np.take_along_axis(planes, k[None], 0)[0]
    hi = np.take_along_axis(planes, (k + 1)[None], 0)[0]
    return hi - lo


def refine_hypotheses(prev: DepthMap, lam: float, D: int, min_width=None) -> DepthHypotheses:
    """Per-pixel planes spanning ``depth +- lam * sigma``.

    The interval width is floored at ``min_width`` (defaults to the previous
    stage's local plane spacing) and its lower end is clamped to a small
    positive epsilon.
    """
    if D < 2:
        raise DomainError(f"need at least two planes, got {D}")
    depth = np.asarray(prev.depth, dtype=np.float64)
    half = lam * np.asarray(prev.sigma, dtype=np.float64)
    if min_width is None:
        min_width = prev.spacing if prev.spacing is not None else 0.0
    half = np.maximum(half, 0.5 * np.asarray(min_width, dtype=np.float64))
    half = np.maximum(half, 1e-6)
    lower = np.maximum(depth - half, DEPTH_EPSILON)
    upper = np.maximum(depth + half, lower + 1e-6)
    t = np.linspace(0.0, 1.0, D).reshape((D,) + (1,) * depth.ndim)
    return DepthHypotheses(lower[None] + t * (upper - lower)[None])


def build_cost_volume(warped, masks) -> CostVolume:
    """Masked population variance across views, per voxel and channel."""
    if len(warped) == 0:
        raise DomainError("cost volume needs at least one view")
    acc = np.zeros(np.shape(warped[0]), dtype=np.float64)
    acc2 = np.zeros_like(acc)
    count = np.zeros(acc.shape[:-1], dtype=np.float64)
    # values are taken relative to the first valid view of each voxel, so
    # identical views give exactly zero variance
    ref = np.zeros_like(acc)
    for v, m in zip(warped, masks):
        m = np.asarray(m, dtype=bool)
        ref = np.where((m & (count == 0))[..., None], np.asarray(v, dtype=np.float64), ref)
        count += m
    for v, m in zip(warped, masks):
        m = np.asarray(m, dtype=np.float64)
        acc += (np.asarray(v, dtype=np.float64) - ref) * m[..., None]
    mean = acc / np.maximum(count, 1.0)[..., None]
    for v, m in zip(warped, masks):
        m = np.asarray(m, dtype=np.float64)
        acc2 += ((np.asarray(v, dtype=np.float64) - ref - mean) ** 2) * m[..., None]
    var = acc2 / np.maximum(count, 1.0)[..., None]
    return CostVolume(var.astype(np.float32), count.astype(np.int32))


def occlusion_robust_volume(warped, masks, sides) -> CostVolume:
    """Per voxel, the least-cost of three view subsets: all, left-hand, right-hand.

    ``sides`` gives each source camera's horizontal offset in the target
    frame.  An occluder hides a surface from the views on one side of the
    target only, so one of the two half-sets usually stays photo-consistent.
    Each subset's variance is rescaled by n / (n - 1) so subsets of different
    size compare fairly; subsets with fewer than two views are skipped.
    """
    sides = np.asarray(sides, dtype=np.float64)
    idx = np.arange(len(warped))
    groups = [idx, idx[sides < 0], idx[sides > 0]]
    best_cost = best_values = best_count = None
    for g in groups:
        if len(g) < 2 or (best_cost is not None and len(g) == len(idx)):
            continue
        cv = build_cost_volume([warped[i] for i in g], [masks[i] for i in g])
        n = cv.count.astype(np.float64)
        values = cv.values.astype(np.float64) * (n / np.maximum(n - 1.0, 1.0))[..., None]
        cost = np.where(n >= 2, values.mean(axis=-1), np.inf)
        if best_cost is None:
            best_cost, best_values, best_count = cost, values, cv.count
            continue
        take = cost < best_cost
        best_cost = np.where(take, cost, best_cost)
        best_values = np.where(take[..., None], values, best_values)
        best_count = np.where(take, cv.count, best_count)
    return CostVolume(best_values.astype(np.float32), best_count.astype(np.int32))


def regularize(cv: CostVolume, temperature=10.0, sigma_spatial=1.0, sigma_depth=0.5) -> np.ndarray:
    """Fixed stand-in for a learned 3D regulariser: smoothed, negated, scaled cost.

    The channel-mean cost of each pixel column is divided by its mean over
    depth, which makes ``temperature`` independent of the feature scale.
    Voxels seen by fewer than two views carry no photo-consistency evidence;
    they are given the worst valid cost of their pixel column.
    """
    cost = cv.values.astype(np.float64).mean(axis=-1)
    flagged = cv.flagged
    if np.any(flagged):
        cost = cost.copy()
        masked = np.where(flagged, -np.inf, cost)
        worst = masked.max(axis=0, keepdims=True)
        worst = np.where(np.isfinite(worst), worst, 0.0)
        cost = np.where(flagged, np.broadcast_to(worst, cost.shape), cost)
    scale = cost.mean(axis=0, keepdims=True)
    cost = np.divide(cost, scale, out=np.zeros_like(cost), where=scale > 1e-12)
    smooth = ndimage.gaussian_filter(cost, (sigma_depth, sigma_spatial, sigma_spatial), mode="nearest")
    return -smooth * temperature


def softmax(logits: np.ndarray, axis=0) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def depth_from_probability(logits: np.ndarray, hyp: DepthHypotheses, lam: float = 1.5) -> DepthMap:
    """Softmax depth distribution -> expected depth, std. deviation, confidence interval."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 2:
        raise DomainError("need at least two depth planes")
    if not np.all(np.isfinite(logits)):
        raise DomainError("non-finite logits")
    P = softmax(logits, axis=0)
    L = hyp.expanded(logits.shape[1:])
    depth = (P * L).sum(axis=0)
    var = (P * (L - depth[None]) ** 2).sum(axis=0)
    sigma = np.sqrt(np.maximum(var, 0.0))
    # guard against round-off pushing the mean outside the plane range
    depth = np.clip(depth, L[0], L[-1])
    interval = np.stack([depth - lam * sigma, depth + lam * sigma], axis=-1)
    return DepthMap(
        depth=depth,
        sigma=sigma,
        interval=interval,
        valid=np.ones(depth.shape, dtype=bool),
        spacing=local_spacing(L, depth),
        probability=P,
    )


@dataclass
class CascadeConfig:
    near: float
    far: float
    planes: tuple = (16, 8)
    lambda_confidence: float = 1.5
    temperature: float = 10.0
    sigma_spatial: float = 1.0
    sigma_depth: float = 0.5
    occlusion_subsets: bool = True

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise DomainError(f"need 0 < near < far, got {self.near}, {self.far}")
        if len(self.planes) != 2 or min(self.planes) < 2:
            raise DomainError(f"planes must be two counts >= 2, got {self.planes}")
        if self.lambda_confidence <= 0:
            raise DomainError("lambda_confidence must be positive")


@dataclass
class CascadeResult:
    coarse: DepthMap  # quarter resolution
    fine: DepthMap  # half resolution
    full: DepthMap  # fine map upsampled to the target resolution
    fine_hypotheses: DepthHypotheses
    fine_volumes: list = field(repr=False)  # per source (D, h/2, w/2, 16)
    fine_masks: list = field(repr=False)

    def averaged_volume(self) -> np.ndarray:
        return average_volumes(self.fine_volumes, self.fine_masks)


def _padded(vp: Viewpoint, pad) -> Viewpoint:
    top, bottom, left, right = pad
    if not any(pad):
        return vp
    k = vp.intrinsics
    return Viewpoint(
        CameraIntrinsics(k.fx, k.fy, k.cx + left, k.cy + top),
        vp.pose,
        vp.width + left + right,
        vp.height + top + bottom,
    )


def pad_of(vp: Viewpoint):
    ph = (-vp.height) % 4
    pw = (-vp.width) % 4
    return (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)


def upsample_depth_map(dm: DepthMap, shape, factor: int = 2) -> DepthMap:
    """Bilinear upsampling with the integer-pixel-centre convention (u -> u / factor)."""
    u, v = pixel_grid(*shape)
    h, w = dm.depth.shape
    x = np.clip(u / factor, 0, w - 1)
    y = np.clip(v / factor, 0, h - 1)

    def up(a):
        return bilinear_sample(a, x, y, dtype=np.float64)[0]

    depth = up(dm.depth)
    sigma = up(dm.sigma)
    interval = up(dm.interval)
    spacing = up(dm.spacing) if dm.spacing is not None else None
    valid = up(dm.valid.astype(np.float64)) > 0.5
    return DepthMap(depth, sigma, interval, valid, spacing)


def cascade_depth(sources, target: Viewpoint, cfg: CascadeConfig, pyramids=None) -> CascadeResult:
    """Two-stage coarse-to-fine depth estimate for ``target``.

    ``sources`` is a sequence of ``(image, Viewpoint)`` pairs; precomputed
    pyramids can be passed in the same order.
    """
    if len(sources) < 2:
        raise DomainError(f"cascade needs at least two source views, got {len(sources)}")
    if pyramids is None:
        pyramids = [extract_pyramid(img) for img, _ in sources]
    pyramids: list[FeaturePyramid]
    src_vps = [_padded(vp, pyr.pad) for (_, vp), pyr in zip(sources, pyramids)]
    tpad = pad_of(target)
    tgt = _padded(target, tpad)
    d_coarse, d_fine = cfg.planes
    sides = [(tgt.pose.R @ vp.pose.center + tgt.pose.t)[0] for vp in src_vps]

    def volume(w, m):
        return occlusion_robust_volume(w, m, sides) if cfg.occlusion_subsets else build_cost_volume(w, m)

    # stage 1: quarter resolution, shared inverse-depth planes
    t1 = tgt.downscaled(2)
    hyp1 = uniform_hypotheses(cfg.near, cfg.far, d_coarse)
    warped, masks = [], []
    for vp, pyr in zip(src_vps, pyramids):
        s1 = vp.downscaled(2)
        vol, msk = zip(*(warp_map(pyr.level1, homography(s1, t1, z), (t1.height, t1.width)) for z in hyp1.planes))
        warped.append(np.stack(vol))
        masks.append(np.stack(msk))
    cv1 = volume(warped, masks)
    logits1 = regularize(cv1, cfg.temperature, cfg.sigma_spatial, cfg.sigma_depth)
    coarse = depth_from_probability(logits1, hyp1, cfg.lambda_confidence)
    coarse.valid = _view_support(cv1, coarse.depth, hyp1.expanded(coarse.shape))

    # stage 2: half resolution, per-pixel planes around the coarse estimate
    t2 = tgt.downscaled(1)
    coarse_up = upsample_depth_map(coarse, (t2.height, t2.width))
    hyp2 = refine_hypotheses(coarse_up, cfg.lambda_confidence, d_fine, 2.0 * coarse_up.spacing)
    warped, masks = [], []
    for vp, pyr in zip(src_vps, pyramids):
        s2 = vp.downscaled(1)
        vol, msk = zip(*(warp_map_depth(pyr.level2, s2, t2, hyp2.planes[d]) for d in range(d_fine)))
        warped.append(np.stack(vol))
        masks.append(np.stack(msk))
    cv2_ = volume(warped, masks)
    logits2 = regularize(cv2_, cfg.temperature, cfg.sigma_spatial, cfg.sigma_depth)
    fine = depth_from_probability(logits2, hyp2, cfg.lambda_confidence)
    fine.valid = _view_support(cv2_, fine.depth, hyp2.planes)

    full = upsample_depth_map(fine, (tgt.height, tgt.width))
    if any(tpad):
        top, bottom, left, right = tpad
        sl = (slice(top, tgt.height - bottom), slice(left, tgt.width - right))
        full = DepthMap(
            full.depth[sl], full.sigma[sl], full.interval[sl], full.valid[sl], full.spacing[sl]
        )
    return CascadeResult(coarse, fine, full, hyp2, warped, masks)


def _view_support(cv: CostVolume, depth: np.ndarray, planes: np.ndarray) -> np.ndarray:
    """True where at least two views observe the plane nearest the estimate."""
    k = np.abs(planes - depth[None]).argmin(axis=0)
    return np.take_along_axis(cv.count, k[None], 0)[0] >= 2
