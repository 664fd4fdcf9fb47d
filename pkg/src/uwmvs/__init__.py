"""Multi-view-stereo reconstruction of scenes seen through a scattering water medium."""

__version__ = "0.1.0"

from .costvolume import CascadeConfig, CascadeResult, DepthMap, cascade_depth
from .estimators import CascadeDepthEstimator, UnderwaterMVS
from .exceptions import DomainError, NumericalError, ParseError
from .geometry import CameraIntrinsics, CameraPose, Viewpoint
from .imaging import SceneDataset, load_dataset
from .losses import LossConfig
from .medium import MediumParams, compose_underwater, render_pixel, restore_pixel
from .synthetic import SceneSpec, generate_dataset, render_dataset
from .training import ModelWeights, RenderResult, TrainConfig, render_novel_view, train_scene

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "CascadeConfig",
    "CascadeDepthEstimator",
    "CascadeResult",
    "DepthMap",
    "DomainError",
    "LossConfig",
    "MediumParams",
    "ModelWeights",
    "NumericalError",
    "ParseError",
    "RenderResult",
    "SceneDataset",
    "SceneSpec",
    "TrainConfig",
    "UnderwaterMVS",
    "Viewpoint",
    "cascade_depth",
    "compose_underwater",
    "generate_dataset",
    "load_dataset",
    "render_dataset",
    "render_novel_view",
    "restore_pixel",
    "render_pixel",
    "train_scene",
]
