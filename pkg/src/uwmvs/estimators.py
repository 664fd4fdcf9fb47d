"""scikit-learn style wrappers around the depth cascade and the per-scene model.

A "sample" here is a whole scene: ``fit`` takes a :class:`SceneDataset`,
``predict``/``transform`` take a viewpoint or a view index into the fitted
scene.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .costvolume import CascadeConfig, DepthMap
from .exceptions import DomainError
from .geometry import Viewpoint, ray_directions
from .imaging.manifest import SceneDataset
from .imaging.metrics import central_crop_eval_region, psnr
from .losses import LossConfig
from .medium import SH_LEVEL
from .training import ModelWeights, RenderResult, SceneContext, TrainConfig, render_novel_view, train_scene


def _check_dataset(X) -> SceneDataset:
    if not isinstance(X, SceneDataset):
        raise DomainError(f"expected a SceneDataset, got {type(X).__name__}")
    if len(X) < 3:
        raise DomainError(f"a scene needs at least 3 views, got {len(X)}")
    return X


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def _cascade_from(est, ds: SceneDataset) -> CascadeConfig:
    return CascadeConfig(
        ds.near,
        ds.far,
        planes=tuple(est.planes),
        lambda_confidence=est.lambda_confidence,
        temperature=est.temperature,
        occlusion_subsets=est.occlusion_subsets,
    )


class _SceneMixin:
    def _target(self, X):
        """Resolve ``X`` (view index or Viewpoint) to ``(viewpoint, cache key, excluded views)``."""
        ctx = self.context_
        if isinstance(X, Viewpoint):
            return X, None, ()
        if isinstance(X, (int, np.integer)):
            i = int(X)
            if not 0 <= i < len(ctx.viewpoints):
                raise DomainError(f"view index {i} out of range [0, {len(ctx.viewpoints)})")
            return ctx.viewpoints[i], ("view", i), (i,)
        raise DomainError(f"expected a view index or Viewpoint, got {type(X).__name__}")


class CascadeDepthEstimator(_SceneMixin, BaseEstimator):
    """Plane-sweep depth for any view of a fitted scene.

    ``predict(i)`` estimates the depth of view ``i`` from its ``n_sources``
    nearest training views (excluding ``i`` itself).
    """

    def __init__(self, planes=(16, 8), lambda_confidence=1.5, temperature=10.0, occlusion_subsets=True, n_sources=4):
        self.planes = planes
        self.lambda_confidence = lambda_confidence
        self.temperature = temperature
        self.occlusion_subsets = occlusion_subsets
        self.n_sources = n_sources

    def fit(self, X, y=None):
        ds = _check_dataset(X)
        self.cascade_config_ = _cascade_from(self, ds)
        self.context_ = SceneContext.from_dataset(ds, self.cascade_config_)
        self.n_views_in_ = len(ds)
        return self

    def predict(self, X, sources=None) -> DepthMap:
        _check_fitted(self, "context_")
        vp, key, exclude = self._target(X)
        if sources is None:
            sources = self.context_.nearest_sources(vp, self.n_sources, exclude=exclude)
        if len(sources) < 2:
            raise DomainError("depth estimation needs at least two source views")
        return self.context_.depth(vp, sources, key=key).depth_map


class UnderwaterMVS(_SceneMixin, BaseEstimator):
    """Per-scene underwater novel-view synthesis and restoration."""

    def __init__(
        self,
        iterations=3000,
        lr=5e-3,
        lr_final=1e-4,
        patch_size=32,
        view_counts=(2, 3, 4),
        view_probs=(0.1, 0.8, 0.1),
        source_pool=4,
        use_medium=True,
        sh_level=SH_LEVEL,
        eq19_compat=False,
        lambda_loss=0.2,
        epsilon=1e-3,
        use_l1_variant=False,
        planes=(16, 8),
        lambda_confidence=1.5,
        temperature=10.0,
        occlusion_subsets=True,
        seed=0,
    ):
        self.iterations = iterations
        self.lr = lr
        self.lr_final = lr_final
        self.patch_size = patch_size
        self.view_counts = view_counts
        self.view_probs = view_probs
        self.source_pool = source_pool
        self.use_medium = use_medium
        self.sh_level = sh_level
        self.eq19_compat = eq19_compat
        self.lambda_loss = lambda_loss
        self.epsilon = epsilon
        self.use_l1_variant = use_l1_variant
        self.planes = planes
        self.lambda_confidence = lambda_confidence
        self.temperature = temperature
        self.occlusion_subsets = occlusion_subsets
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            lr=self.lr,
            lr_final=self.lr_final,
            view_counts=self.view_counts,
            view_probs=self.view_probs,
            patch_size=self.patch_size,
            source_pool=self.source_pool,
            seed=self.seed,
            use_medium=self.use_medium,
            sh_level=self.sh_level,
            eq19_compat=self.eq19_compat,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.lambda_loss, self.epsilon, self.use_l1_variant)

    def fit(self, X, y=None, callback=None):
        ds = _check_dataset(X)
        cfg, loss_cfg = self.train_config(), self.loss_config()
        self.cascade_config_ = _cascade_from(self, ds)
        self.context_ = SceneContext.from_dataset(ds, self.cascade_config_)
        result = train_scene(ds, cfg, loss_cfg, context=self.context_, callback=callback)
        self.weights_ = result.weights
        self.loss_trace_ = result.trace_array()
        self.n_views_in_ = len(ds)
        return self

    def attach(self, X):
        """Bind a trained model (e.g. after :meth:`load`) to a scene without training."""
        _check_fitted(self, "weights_")
        ds = _check_dataset(X)
        self.cascade_config_ = _cascade_from(self, ds)
        self.context_ = SceneContext.from_dataset(ds, self.cascade_config_)
        self.n_views_in_ = len(ds)
        return self

    def render(self, X, sources=None) -> RenderResult:
        """Full inference for a view index or a novel Viewpoint."""
        _check_fitted(self, "weights_")
        _check_fitted(self, "context_")
        vp, key, exclude = self._target(X)
        return render_novel_view(self.weights_, self.context_, vp, sources=sources, exclude=exclude, key=key)

    def predict(self, X) -> np.ndarray:
        """Underwater rendering I_hat of the requested view."""
        return self.render(X).underwater

    def transform(self, X) -> np.ndarray:
        """Medium-free (clear) rendering of the requested view."""
        return self.render(X).clear

    def medium(self, X):
        """Per-pixel :class:`MediumParams` along the rays of the requested view."""
        _check_fitted(self, "weights_")
        vp, _, _ = self._target(X)
        return self.weights_.medium_params(ray_directions(vp))

    def score(self, X, y=None) -> float:
        """Mean central-crop PSNR of the underwater renderings of the held-out views of ``X``."""
        ds = _check_dataset(X)
        views = ds.heldout_indices or list(range(len(ds)))
        vals = []
        for i in views:
            pred = np.clip(self.predict(i), 0.0, 1.0)
            vals.append(psnr(central_crop_eval_region(pred), central_crop_eval_region(ds.images[i])))
        return float(np.mean(vals))

    def save(self, path):
        _check_fitted(self, "weights_")
        return self.weights_.save(path, {"estimator_params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path) -> "UnderwaterMVS":
        weights, meta = ModelWeights.load(path)
        est = cls(**meta.get("estimator_params", {}))
        est.weights_ = weights
        return est


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
