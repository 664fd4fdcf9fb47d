"""Dataset manifests: a JSON record per view with camera and file references."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..exceptions import DomainError, ParseError
from ..geometry import CameraIntrinsics, CameraPose, Viewpoint
from .pfm import read_depth
from .png import read_image

MANIFEST_FORMAT = "uwmvs-manifest"
MANIFEST_VERSION = 1


@dataclass
class ViewRecord:
    name: str
    viewpoint: Viewpoint
    image_path: str
    clear_path: str | None = None
    depth_path: str | None = None
    split: str = "train"


@dataclass
class DatasetManifest:
    views: list[ViewRecord]
    near: float
    far: float
    medium_path: str | None = None
    root: Path = field(default_factory=Path)

    def viewpoint_record(self, i: int) -> dict:
        return _view_to_dict(self.views[i])


def _view_to_dict(v: ViewRecord) -> dict:
    k = v.viewpoint.intrinsics
    p = v.viewpoint.pose
    rec = {
        "name": v.name,
        "image": v.image_path,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "pose": {"R": [float(x) for x in p.R.reshape(-1)], "t": [float(x) for x in p.t]},
        "width": v.viewpoint.width,
        "height": v.viewpoint.height,
        "split": v.split,
    }
    if v.clear_path is not None:
        rec["clear"] = v.clear_path
    if v.depth_path is not None:
        rec["depth"] = v.depth_path
    return rec


def viewpoint_from_dict(rec: dict) -> Viewpoint:
    k = rec["intrinsics"]
    pose = rec["pose"]
    return Viewpoint(
        CameraIntrinsics(float(k["fx"]), float(k["fy"]), float(k["cx"]), float(k["cy"])),
        CameraPose(np.array(pose["R"], dtype=np.float64).reshape(3, 3), np.array(pose["t"], dtype=np.float64)),
        int(rec["width"]),
        int(rec["height"]),
    )


def viewpoint_to_dict(vp: Viewpoint) -> dict:
    k, p = vp.intrinsics, vp.pose
    return {
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "pose": {"R": [float(x) for x in p.R.reshape(-1)], "t": [float(x) for x in p.t]},
        "width": vp.width,
        "height": vp.height,
    }


def write_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "near": manifest.near,
        "far": manifest.far,
        "views": [_view_to_dict(v) for v in manifest.views],
    }
    if manifest.medium_path is not None:
        doc["medium"] = manifest.medium_path
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest is not valid JSON: {exc.msg}", exc.pos, path) from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"not a {MANIFEST_FORMAT} file", 0, path)
    root = path.parent
    views = []
    for i, rec in enumerate(doc.get("views", [])):
        try:
            vp = viewpoint_from_dict(rec)
            view = ViewRecord(
                name=str(rec.get("name", f"view_{i:03d}")),
                viewpoint=vp,
                image_path=rec["image"],
                clear_path=rec.get("clear"),
                depth_path=rec.get("depth"),
                split=rec.get("split", "train"),
            )
        except KeyError as exc:
            raise DomainError(f"manifest view {i} is missing field {exc}") from None
        views.append(view)
        if check_files:
            for rel in (view.image_path, view.clear_path, view.depth_path):
                if rel is not None and not (root / rel).is_file():
                    raise FileNotFoundError(f"manifest view {i} references missing file {root / rel}")
    near, far = float(doc["near"]), float(doc["far"])
    if not 0 < near < far:
        raise DomainError(f"manifest depth range invalid: near={near}, far={far}")
    return DatasetManifest(views, near, far, doc.get("medium"), root)


@dataclass
class SceneDataset:
    """In-memory dataset: underwater images plus optional ground truth."""

    images: list[np.ndarray]
    viewpoints: list[Viewpoint]
    near: float
    far: float
    names: list[str] = field(default_factory=list)
    splits: list[str] = field(default_factory=list)
    clear: list | None = None
    depth: list | None = None
    medium: dict | None = None

    def __post_init__(self):
        if not self.names:
            self.names = [f"view_{i:03d}" for i in range(len(self.images))]
        if not self.splits:
            self.splits = ["train"] * len(self.images)

    def __len__(self):
        return len(self.images)

    @property
    def train_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == "train"]

    @property
    def heldout_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s != "train"]


def load_dataset(manifest_path) -> SceneDataset:
    m = read_manifest(manifest_path)
    images = [read_image(m.root / v.image_path) for v in m.views]
    clear = [read_image(m.root / v.clear_path) if v.clear_path else None for v in m.views]
    depth = [read_depth(m.root / v.depth_path) if v.depth_path else None for v in m.views]
    medium = None
    if m.medium_path:
        medium = json.loads((m.root / m.medium_path).read_text())
    return SceneDataset(
        images=images,
        viewpoints=[v.viewpoint for v in m.views],
        near=m.near,
        far=m.far,
        names=[v.name for v in m.views],
        splits=[v.split for v in m.views],
        clear=clear if any(c is not None for c in clear) else None,
        depth=depth if any(d is not None for d in depth) else None,
        medium=medium,
    )
