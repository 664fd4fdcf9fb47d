from .manifest import (
    DatasetManifest,
    SceneDataset,
    ViewRecord,
    load_dataset,
    read_manifest,
    viewpoint_from_dict,
    viewpoint_to_dict,
    write_manifest,
)
from .metrics import central_crop_eval_region, gaussian_window, psnr, ssim, ssim_map
from .pfm import read_depth, read_pfm, write_depth, write_pfm
from .png import read_image, srgb_decode, srgb_encode, write_image

__all__ = [
    "DatasetManifest",
    "SceneDataset",
    "ViewRecord",
    "central_crop_eval_region",
    "gaussian_window",
    "load_dataset",
    "psnr",
    "read_depth",
    "read_image",
    "read_manifest",
    "read_pfm",
    "srgb_decode",
    "srgb_encode",
    "ssim",
    "ssim_map",
    "viewpoint_from_dict",
    "viewpoint_to_dict",
    "write_depth",
    "write_image",
    "write_manifest",
    "write_pfm",
]
