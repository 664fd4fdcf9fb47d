"""Per-scene optimisation of the medium subnet and colour MLP, and novel-view rendering.

One training step picks a target view and 2-4 source views, estimates the
target depth with the cascade (treated as a constant), gathers per-view
colours and features for a random target patch, restores every source
colour to its clear value, blends them, re-immerses the blend at the target
depth and compares the result with the target photograph.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .costvolume import CascadeConfig, DepthMap, pad_of, cascade_depth
from .exceptions import DomainError, NumericalError
from .features import LEVEL_CHANNELS, PixelAlignedFeature, extract_pyramid, grid_features, pool_views, ray_delta
from .geometry import Viewpoint, bilinear_sample, pixel_grid, project, ray_directions, unproject
from .losses import LossConfig, total_loss
from .medium import (
    RESTORE_GUARD,
    SH_LEVEL,
    MLPWeights,
    MediumParams,
    blend_logits,
    init_color_weights,
    init_medium_weights,
    medium_heads,
    render_tensor,
    restore_tensor,
    sh_encode,
    softmax_views,
)
from .optim import ParameterSet, adam_step

RAY_DIM = 4
VIEW_DIM = LEVEL_CHANNELS[2] + RAY_DIM  # f_i
IMG_DIM = 2 * VIEW_DIM  # f_img: mean and variance of f_i
GRID_DIM = LEVEL_CHANNELS[1]  # f_grid
COLOR_IN = IMG_DIM + GRID_DIM + VIEW_DIM
_LOG_GUARD = -math.log(RESTORE_GUARD)


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: float = 5e-3
    lr_final: float = 1e-4
    view_counts: tuple = (2, 3, 4)
    view_probs: tuple = (0.1, 0.8, 0.1)
    patch_size: int = 32
    source_pool: int = 4
    seed: int = 0
    use_medium: bool = True
    sh_level: int = SH_LEVEL
    eq19_compat: bool = False

    def __post_init__(self):
        self.view_counts = tuple(int(n) for n in self.view_counts)
        self.view_probs = tuple(float(p) for p in self.view_probs)
        if self.iterations < 1:
            raise DomainError("iterations must be >= 1")
        if len(self.view_counts) != len(self.view_probs):
            raise DomainError("view_counts and view_probs differ in length")
        if any(p < 0 for p in self.view_probs) or abs(sum(self.view_probs) - 1.0) > 1e-9:
            raise DomainError(f"view_probs must be non-negative and sum to 1, got {self.view_probs}")
        if min(self.view_counts) < 2:
            raise DomainError("every source-view count must be >= 2")
        if max(self.view_counts) > self.source_pool:
            raise DomainError("source_pool must hold the largest source-view count")
        if self.patch_size < 11:
            raise DomainError("patch_size must be at least 11 (SSIM window)")
        if not (self.lr > 0 and self.lr_final > 0):
            raise DomainError("learning rates must be positive")

    def learning_rate(self, it: int) -> float:
        """Cosine decay from ``lr`` to ``lr_final`` over the run."""
        if self.iterations == 1:
            return self.lr
        t = it / (self.iterations - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * t))


@dataclass
class ModelWeights:
    color: MLPWeights
    medium: MLPWeights | None
    sh_level: int = SH_LEVEL
    eq19_compat: bool = False

    @property
    def use_medium(self) -> bool:
        return self.medium is not None

    @classmethod
    def init(cls, rng: np.random.Generator, use_medium=True, sh_level=SH_LEVEL, eq19_compat=False):
        medium = init_medium_weights(rng, sh_level) if use_medium else None
        return cls(init_color_weights(rng, COLOR_IN), medium, sh_level, eq19_compat)

    def arrays(self) -> dict:
        out = self.color.named_arrays("color")
        if self.medium is not None:
            out.update(self.medium.named_arrays("medium"))
        return out

    def metadata(self) -> dict:
        return {"sh_level": self.sh_level, "eq19_compat": self.eq19_compat, "use_medium": self.use_medium}

    @classmethod
    def from_arrays(cls, arrays, meta) -> "ModelWeights":
        medium = MLPWeights.from_named(arrays, "medium") if meta.get("use_medium", True) else None
        return cls(
            MLPWeights.from_named(arrays, "color"),
            medium,
            int(meta.get("sh_level", SH_LEVEL)),
            bool(meta.get("eq19_compat", False)),
        )

    def save(self, path, extra_meta: dict | None = None):
        meta = dict(self.metadata())
        meta.update(extra_meta or {})
        return save_checkpoint(path, self.arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["ModelWeights", dict]:
        arrays, meta = load_checkpoint(path)
        return cls.from_arrays(arrays, meta), meta

    def medium_params(self, directions) -> MediumParams:
        """Medium parameters for world-frame unit ``directions`` (..., 3)."""
        d = np.asarray(directions, dtype=np.float64)
        if self.medium is None:
            z = np.zeros(d.shape[:-1] + (3,))
            return MediumParams(z, z.copy(), z.copy())
        sa, sb, cb = medium_heads(sh_encode(d, self.sh_level).astype(np.float32), self.medium)
        return MediumParams(sa.data.astype(np.float64), sb.data.astype(np.float64), cb.data.astype(np.float64))


@dataclass
class TrainResult:
    weights: ModelWeights
    trace: list  # dicts with iteration, recon, dssim, total
    config: TrainConfig
    loss_config: LossConfig
    params: ParameterSet = field(repr=False, default=None)

    def trace_array(self) -> np.ndarray:
        return np.array([[r["iteration"], r["recon"], r["dssim"], r["total"]] for r in self.trace])


# -- scene context -------------------------------------------------------------
@dataclass
class _DepthEntry:
    depth: np.ndarray  # (H, W) full resolution
    valid: np.ndarray
    depth_map: DepthMap
    fine_planes: np.ndarray  # (D, h/2, w/2)
    volume: np.ndarray  # (D, h/2, w/2, F) view-averaged fine volume
    pad: tuple = (0, 0, 0, 0)  # top, bottom, left, right padding of the volume grid


class SceneContext:
    """Images, cameras, feature pyramids and a cache of cascade results."""

    def __init__(self, images, viewpoints, near, far, train_indices=None, cascade: CascadeConfig | None = None):
        if len(images) != len(viewpoints):
            raise DomainError("images and viewpoints differ in count")
        self.images = [np.asarray(im, dtype=np.float32) for im in images]
        self.viewpoints = list(viewpoints)
        self.train_indices = list(range(len(images))) if train_indices is None else list(train_indices)
        self.cascade = cascade or CascadeConfig(near, far)
        self.pyramids = [extract_pyramid(im) for im in self.images]
        self._cache: dict = {}

    @classmethod
    def from_dataset(cls, ds, cascade: CascadeConfig | None = None) -> "SceneContext":
        return cls(ds.images, ds.viewpoints, ds.near, ds.far, ds.train_indices, cascade)

    def nearest_sources(self, target: Viewpoint, k: int, exclude=()) -> list[int]:
        c = target.pose.center
        cand = [i for i in self.train_indices if i not in exclude]
        cand.sort(key=lambda i: (float(np.linalg.norm(self.viewpoints[i].pose.center - c)), i))
        return sorted(cand[:k])

    def depth(self, target: Viewpoint, sources, key=None) -> _DepthEntry:
        sources = tuple(sorted(int(s) for s in sources))
        key = (key if key is not None else _pose_key(target), sources)
        hit = self._cache.get(key)
        if hit is None:
            res = cascade_depth(
                [(self.images[i], self.viewpoints[i]) for i in sources],
                target,
                self.cascade,
                [self.pyramids[i] for i in sources],
            )
            hit = _DepthEntry(
                res.full.depth,
                res.full.valid,
                res.full,
                res.fine_hypotheses.expanded(res.fine.shape),
                res.averaged_volume(),
                pad_of(target),
            )
            self._cache[key] = hit
        return hit


def _pose_key(vp: Viewpoint):
    return (np.round(vp.pose.R, 12).tobytes(), np.round(vp.pose.t, 12).tobytes(), vp.intrinsics, vp.width, vp.height)


# -- batch assembly -------------------------------------------------------------
@dataclass
class Batch:
    c_hat: np.ndarray  # (N, P, 3) sampled source colours
    valid: np.ndarray  # (N, P)
    z_src: np.ndarray  # (N, P, 1) restoration depth per source sample
    dir_src: np.ndarray  # (N, P, 3)
    dir_tgt: np.ndarray  # (P, 3)
    depth: np.ndarray  # (P, 1) target depth
    f_views: np.ndarray  # (N, P, VIEW_DIM)
    f_img: np.ndarray  # (P, IMG_DIM)
    f_grid: np.ndarray  # (P, GRID_DIM)


def gather(ctx: SceneContext, target: Viewpoint, sources, entry: _DepthEntry, pixels) -> Batch:
    """Per-view samples for target ``pixels`` (P, 2) given the cached depth."""
    pixels = np.asarray(pixels, dtype=np.float64)
    u = pixels[:, 0].astype(np.intp)
    v = pixels[:, 1].astype(np.intp)
    depth = entry.depth[v, u].astype(np.float64)
    X = unproject(target, pixels, depth)
    d_tgt = ray_directions(target, pixels)
    c_hat, valid, z_src, dirs, views = [], [], [], [], []
    for i in sources:
        vp = ctx.viewpoints[i]
        uv, z = project(vp, X, strict=False)
        front = z > 1e-6
        col, ok = bilinear_sample(ctx.images[i], uv[:, 0], uv[:, 1])
        top, _, left, _ = ctx.pyramids[i].pad
        feat, _ = bilinear_sample(ctx.pyramids[i].level3, uv[:, 0] + left, uv[:, 1] + top)
        ok = ok & front
        d = X - vp.pose.center
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        rd = ray_delta(d, d_tgt)
        c_hat.append(col)
        valid.append(ok)
        z_src.append(np.where(front, z, depth))
        dirs.append(d)
        views.append(PixelAlignedFeature(feat, rd, ok))
    f_img, _ = pool_views(views)
    offset = np.array([entry.pad[2], entry.pad[0]], dtype=np.float64)
    f_grid, _ = grid_features(entry.volume, entry.fine_planes, (pixels + offset) / 2.0, depth)
    return Batch(
        c_hat=np.stack(c_hat).astype(np.float32),
        valid=np.stack(valid),
        z_src=np.stack(z_src)[..., None],
        dir_src=np.stack(dirs),
        dir_tgt=d_tgt,
        depth=depth[:, None],
        f_views=np.stack([f.augmented for f in views]).astype(np.float32),
        f_img=f_img,
        f_grid=f_grid,
    )


@dataclass
class Forward:
    underwater: Tensor  # (P, 3)
    clear: Tensor  # (P, 3) blended clear colour
    i_atten: Tensor
    i_bs: Tensor
    weights: Tensor  # (N, P)
    ill_conditioned: np.ndarray  # (N, P)


def forward(model: ModelWeights, batch: Batch) -> Forward:
    """Differentiable pipeline from gathered samples to the re-immersed target colour."""
    n, p = batch.valid.shape
    valid = batch.valid
    ill = np.zeros_like(valid)
    if model.medium is not None:
        dirs = np.concatenate([batch.dir_src.reshape(-1, 3), batch.dir_tgt], axis=0)
        enc = sh_encode(dirs, model.sh_level).astype(np.float32)
        sa, sb, cb = medium_heads(enc, model.medium)
        k = n * p
        sa_s, sb_s, cb_s = (t[:k].reshape(n, p, 3) for t in (sa, sb, cb))
        sa_t, sb_t, cb_t = sa[k:], sb[k:], cb[k:]
        # views whose transmission falls below the guard are flagged and not inverted
        ill = (sa_s.data * batch.z_src > _LOG_GUARD).any(axis=-1)
        z_src = np.where(ill[..., None], 0.0, batch.z_src).astype(np.float32)
        clear_src = restore_tensor(Tensor(batch.c_hat), sa_s, sb_s, cb_s, z_src)
        valid = valid & ~ill
    else:
        clear_src = Tensor(batch.c_hat)
    logits = blend_logits(batch.f_img, batch.f_grid, batch.f_views, model.color)
    w = softmax_views(logits, valid)
    clear = ad.sum(clear_src * w.reshape(n, p, 1), axis=0)
    if model.medium is not None:
        out, i_att, i_bs = render_tensor(clear, sa_t, sb_t, cb_t, batch.depth.astype(np.float32), model.eq19_compat)
    else:
        out, i_att = clear, clear
        i_bs = Tensor(np.zeros(clear.shape, dtype=clear.dtype))
    return Forward(out, clear, i_att, i_bs, w, ill)


# -- training -------------------------------------------------------------------
def _trainable(model: ModelWeights, params: ParameterSet) -> ModelWeights:
    color = model.color.register(params, "color")
    medium = model.medium.register(params, "medium") if model.medium is not None else None
    return ModelWeights(color, medium, model.sh_level, model.eq19_compat)


def _snapshot(model: ModelWeights) -> ModelWeights:
    def copy(w):
        if w is None:
            return None
        return MLPWeights([(np.array(_d(W)), np.array(_d(b))) for W, b in w.layers])

    return ModelWeights(copy(model.color), copy(model.medium), model.sh_level, model.eq19_compat)


def _d(x):
    return x.data if isinstance(x, Tensor) else x


def train_scene(
    dataset,
    cfg: TrainConfig | None = None,
    loss_cfg: LossConfig | None = None,
    cascade: CascadeConfig | None = None,
    context: SceneContext | None = None,
    callback=None,
) -> TrainResult:
    """Fit the medium subnet and colour MLP to one scene.

    ``dataset`` is a :class:`~uwmvs.imaging.SceneDataset`; only its training
    views are used.  ``callback(iteration, parts)`` is invoked after every step.
    """
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    ctx = context or SceneContext.from_dataset(dataset, cascade)
    train = ctx.train_indices
    if len(train) < 5:
        raise DomainError(f"training needs at least 5 posed training views, got {len(train)}")
    h, w = ctx.images[train[0]].shape[:2]
    ps = cfg.patch_size
    if ps > min(h, w):
        raise DomainError(f"patch size {ps} exceeds the image size {h}x{w}")

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng = np.random.Generator(np.random.Philox(seeds[0]))
    rng = np.random.Generator(np.random.Philox(seeds[1]))
    params = ParameterSet()
    model = _trainable(ModelWeights.init(init_rng, cfg.use_medium, cfg.sh_level, cfg.eq19_compat), params)
    pools = {t: ctx.nearest_sources(ctx.viewpoints[t], cfg.source_pool, exclude=(t,)) for t in train}

    trace = []
    for it in range(cfg.iterations):
        target = int(rng.choice(train))
        n_src = int(rng.choice(cfg.view_counts, p=cfg.view_probs))
        pool = pools[target]
        sources = sorted(int(s) for s in rng.choice(pool, size=min(n_src, len(pool)), replace=False))
        top = int(rng.integers(0, h - ps + 1))
        left = int(rng.integers(0, w - ps + 1))

        tvp = ctx.viewpoints[target]
        entry = ctx.depth(tvp, sources, key=("view", target))
        u, v = pixel_grid(ps, ps)
        pix = np.stack([u.ravel() + left, v.ravel() + top], axis=-1)
        batch = gather(ctx, tvp, sources, entry, pix)
        fw = forward(model, batch)
        pred = fw.underwater.reshape(ps, ps, 3)
        truth = ctx.images[target][top : top + ps, left : left + ps]
        parts: dict = {}
        covered = batch.valid.any(axis=0).reshape(ps, ps)
        if not covered.any():
            continue
        loss = total_loss(pred, truth, loss_cfg, parts, mask=covered)
        if not np.isfinite(loss.data):
            raise NumericalError(
                f"non-finite loss at iteration {it} (view {target}, sources {sources}, "
                f"pixel block rows {top}-{top + ps - 1}, cols {left}-{left + ps - 1})"
            )
        loss.backward()
        adam_step(params, cfg.learning_rate(it))
        parts["iteration"] = it
        trace.append(parts)
        if callback is not None:
            callback(it, parts)

    return TrainResult(_snapshot(model), trace, cfg, loss_cfg, params)


# -- inference --------------------------------------------------------------------
@dataclass
class RenderResult:
    underwater: np.ndarray  # I_hat = I_atten + I_bs
    clear: np.ndarray  # blended clear colour (unclamped)
    depth: DepthMap  # full-resolution depth estimate
    i_atten: np.ndarray
    i_bs: np.ndarray
    sources: list
    medium: MediumParams | None = None

    def __iter__(self):
        return iter((self.underwater, self.clear, self.depth, self.i_atten, self.i_bs))


def render_novel_view(
    model: ModelWeights,
    context: SceneContext,
    target: Viewpoint,
    sources=None,
    exclude=(),
    chunk: int = 4096,
    key=None,
) -> RenderResult:
    """Render ``target`` from the scene's training views.

    ``sources`` defaults to the nearest training views (up to four, never
    the excluded indices).
    """
    if sources is None:
        sources = context.nearest_sources(target, 4, exclude=exclude)
    sources = sorted(int(s) for s in sources)
    if len(sources) < 2:
        raise DomainError("rendering needs at least two source views")
    entry = context.depth(target, sources, key=key)
    h, w = target.height, target.width
    u, v = pixel_grid(h, w)
    pix = np.stack([u.ravel(), v.ravel()], axis=-1)
    outs = {"underwater": [], "clear": [], "i_atten": [], "i_bs": []}
    for s in range(0, len(pix), chunk):
        batch = gather(context, target, sources, entry, pix[s : s + chunk])
        fw = forward(model, batch)
        outs["underwater"].append(fw.underwater.data)
        outs["clear"].append(fw.clear.data)
        outs["i_atten"].append(fw.i_atten.data)
        outs["i_bs"].append(fw.i_bs.data)
    img = {k: np.concatenate(val).reshape(h, w, 3) for k, val in outs.items()}
    dm = entry.depth_map
    medium = model.medium_params(ray_directions(target)) if model.use_medium else None
    return RenderResult(
        img["i_atten"] + img["i_bs"] if model.use_medium else img["underwater"],
        img["clear"],
        dm,
        img["i_atten"],
        img["i_bs"],
        sources,
        medium,
    )


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
