"""Synthetic underwater scenes with exact ground truth.

Scenes are piecewise fronto-parallel planes (world ``z = const``) with a
procedural texture, observed through a homogeneous (or direction-linear)
water medium by a forward-facing camera arc.  :func:`oracle_render`
evaluates the image formation model in float64 and is the reference every
other stage is checked against.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import DomainError
from .geometry import CameraIntrinsics, CameraPose, Viewpoint, bilinear_sample, pixel_grid
from .imaging.manifest import DatasetManifest, SceneDataset, ViewRecord, load_dataset, write_manifest
from .imaging.pfm import write_depth
from .imaging.png import read_image, write_image


class SpecError(DomainError):
    """Invalid scene specification; the message names the offending field."""


@dataclass
class PlaneSpec:
    depth: float
    x_min: float = -np.inf
    x_max: float = np.inf


@dataclass
class TextureSpec:
    kind: str = "checker_noise"  # checker_noise | constant | image
    base_color: tuple = (0.55, 0.5, 0.45)
    tint: tuple = (1.0, 0.8, 0.6)
    contrast: float = 0.25
    checker_size: float = 0.5
    checker_sharpness: float = 1.5
    noise_scale: float = 0.3
    noise_amplitude: float = 0.12
    path: str | None = None
    texel_size: float = 0.02


@dataclass
class MediumSpec:
    sigma_atten: tuple = (0.4, 0.25, 0.15)
    sigma_bs: tuple = (0.15, 0.25, 0.35)
    c_bs: tuple = (0.10, 0.30, 0.45)
    # optional 3x3 matrices: sigma(d) = max(sigma + G @ d, 0) for unit direction d
    sigma_atten_dir: list | None = None
    sigma_bs_dir: list | None = None


@dataclass
class CameraRigSpec:
    count: int = 8
    fx: float = 80.0
    fy: float = 80.0
    arc_degrees: float = 24.0
    radius: float = 3.0
    look_depth: float = 3.0
    aim_depth: float | None = None  # depth of the common aim point; None aims at the arc centre
    vertical: float = 0.15
    depth_swing: float = 0.15
    poses: list | None = None  # explicit [{"R": [9], "t": [3]}, ...] overrides the arc


@dataclass
class SceneSpec:
    width: int = 96
    height: int = 64
    planes: list = field(default_factory=lambda: [PlaneSpec(2.0, x_max=0.0), PlaneSpec(4.0)])
    texture: TextureSpec = field(default_factory=TextureSpec)
    medium: MediumSpec = field(default_factory=MediumSpec)
    cameras: CameraRigSpec = field(default_factory=CameraRigSpec)
    heldout: tuple = (3,)
    background_depth: float = 20.0
    background_color: tuple = (0.5, 0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # -- validation ----------------------------------------------------
    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise SpecError(f"{name}: {msg}")

        need(int(self.width) >= 8 and int(self.height) >= 8, "width/height", "image must be at least 8x8")
        need(len(self.planes) >= 1, "planes", "at least one plane is required")
        for i, p in enumerate(self.planes):
            need(p.depth > 0, f"planes[{i}].depth", "must be positive")
            need(p.x_min < p.x_max, f"planes[{i}]", "x_min must be below x_max")
        m = self.medium
        for name in ("sigma_atten", "sigma_bs", "c_bs"):
            v = np.asarray(getattr(m, name), dtype=np.float64)
            need(v.shape == (3,), f"medium.{name}", "needs three per-channel values")
            need(np.all(np.isfinite(v)) and np.all(v >= 0), f"medium.{name}", "must be finite and >= 0")
        need(np.all(np.asarray(m.c_bs) <= 1), "medium.c_bs", "must lie in [0, 1]")
        for name in ("sigma_atten_dir", "sigma_bs_dir"):
            g = getattr(m, name)
            if g is not None:
                need(np.asarray(g, dtype=np.float64).shape == (3, 3), f"medium.{name}", "must be 3x3")
        c = self.cameras
        need(c.fx > 0 and c.fy > 0, "cameras.fx/fy", "focal lengths must be positive")
        n = len(c.poses) if c.poses is not None else c.count
        need(n >= 2, "cameras.count", "at least two cameras are required")
        for h in self.heldout:
            need(0 <= h < n, "heldout", f"index {h} out of range for {n} cameras")
        t = self.texture
        need(t.kind in ("checker_noise", "constant", "image"), "texture.kind", f"unknown kind {t.kind!r}")
        if t.kind == "image":
            need(t.path is not None, "texture.path", "required for image textures")
        need(self.background_depth > 0, "background_depth", "must be positive")

    # -- (de)serialisation ---------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["heldout"] = list(self.heldout)
        for p in d["planes"]:
            for k in ("x_min", "x_max"):
                if not np.isfinite(p[k]):
                    p[k] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        try:
            planes = []
            for i, p in enumerate(d.pop("planes", None) or [{"depth": 2.0, "x_max": 0.0}, {"depth": 4.0}]):
                p = dict(p)
                x_min = p.pop("x_min", None)
                x_max = p.pop("x_max", None)
                planes.append(
                    PlaneSpec(
                        float(p.pop("depth")),
                        -np.inf if x_min is None else float(x_min),
                        np.inf if x_max is None else float(x_max),
                    )
                )
                if p:
                    raise SpecError(f"planes[{i}]: unknown field(s) {sorted(p)}")
            sub = {
                "texture": _build(TextureSpec, d.pop("texture", {}), "texture"),
                "medium": _build(MediumSpec, d.pop("medium", {}), "medium"),
                "cameras": _build(CameraRigSpec, d.pop("cameras", {}), "cameras"),
            }
            known = {f.name for f in fields(cls)}
            unknown = set(d) - known
            if unknown:
                raise SpecError(f"unknown field(s) {sorted(unknown)}")
            if "heldout" in d:
                d["heldout"] = tuple(int(x) for x in d["heldout"])
            for k in ("background_color",):
                if k in d:
                    d[k] = tuple(d[k])
            return cls(planes=planes, **sub, **d)
        except KeyError as exc:
            raise SpecError(f"missing required field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "SceneSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec file is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _build(kind, d, prefix):
    d = dict(d or {})
    known = {f.name for f in fields(kind)}
    unknown = set(d) - known
    if unknown:
        raise SpecError(f"{prefix}: unknown field(s) {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list) and k not in ("poses", "sigma_atten_dir", "sigma_bs_dir"):
            d[k] = tuple(v)
    return kind(**d)


# -- cameras -------------------------------------------------------------------
def camera_viewpoints(spec: SceneSpec) -> list[Viewpoint]:
    c = spec.cameras
    k = CameraIntrinsics(c.fx, c.fy, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0)
    if c.poses is not None:
        poses = [CameraPose(np.reshape(p["R"], (3, 3)), p["t"]) for p in c.poses]
    else:
        poses = []
        half = np.deg2rad(c.arc_degrees) / 2.0
        for i in range(c.count):
            phi = -half + 2 * half * i / max(c.count - 1, 1)
            swing = c.depth_swing * (1.0 if i % 2 else -1.0)
            centre = np.array(
                [
                    c.radius * np.sin(phi),
                    c.vertical * np.sin(2 * np.pi * i / c.count),
                    c.look_depth - c.radius * np.cos(phi) + swing,
                ]
            )
            aim = c.look_depth if c.aim_depth is None else c.aim_depth
            poses.append(CameraPose.look_at(centre, (0.0, 0.0, aim)))
    return [Viewpoint(k, p, spec.width, spec.height) for p in poses]


# -- texture -------------------------------------------------------------------
class _ValueNoise:
    """Smooth lattice noise; one independent lattice per (plane, channel)."""

    SIZE = 64

    def __init__(self, seed: int, planes: int):
        rng = np.random.Generator(np.random.Philox(seed))
        self.table = rng.random((planes, 3, self.SIZE, self.SIZE))

    def __call__(self, plane: int, x, y):
        n = self.SIZE
        xi = np.floor(x)
        yi = np.floor(y)
        fx = x - xi
        fy = y - yi
        sx = fx * fx * (3 - 2 * fx)
        sy = fy * fy * (3 - 2 * fy)
        x0 = np.mod(xi, n).astype(np.intp)
        y0 = np.mod(yi, n).astype(np.intp)
        x1 = (x0 + 1) % n
        y1 = (y0 + 1) % n
        out = []
        for c in range(3):
            t = self.table[plane, c]
            top = t[y0, x0] * (1 - sx) + t[y0, x1] * sx
            bot = t[y1, x0] * (1 - sx) + t[y1, x1] * sx
            out.append(top * (1 - sy) + bot * sy)
        return np.stack(out, axis=-1)


def _texture(spec: SceneSpec, plane: int, x, y, noise: _ValueNoise, image=None):
    t = spec.texture
    if t.kind == "constant":
        return np.broadcast_to(np.asarray(t.base_color, dtype=np.float64), x.shape + (3,)).copy()
    if t.kind == "image":
        h, w = image.shape[:2]
        u = np.mod(x / t.texel_size, w - 1)
        v = np.mod(y / t.texel_size, h - 1)
        return bilinear_sample(image, u, v, dtype=np.float64)[0]
    ox, oy = 1.7 * plane, 2.3 * plane
    xs, ys = x + ox, y + oy
    checker = np.tanh(
        t.checker_sharpness * np.sin(np.pi * xs / t.checker_size) * np.sin(np.pi * ys / t.checker_size)
    )
    nz = 0.65 * noise(plane, xs / t.noise_scale, ys / t.noise_scale)
    nz = nz + 0.35 * noise(plane, 2.0 * xs / t.noise_scale + 17.0, 2.0 * ys / t.noise_scale + 31.0)
    col = (
        np.asarray(t.base_color)
        + t.contrast * checker[..., None] * np.asarray(t.tint)
        + t.noise_amplitude * 2.0 * (nz - 0.5)
    )
    return np.clip(col, 0.02, 0.98)


# -- rendering ------------------------------------------------------------------
def medium_coefficients(spec: SceneSpec, directions: np.ndarray):
    """Ground-truth per-pixel (sigma_atten, sigma_bs, c_bs), each (..., 3)."""
    m = spec.medium
    shape = directions.shape[:-1] + (3,)
    sa = np.broadcast_to(np.asarray(m.sigma_atten, dtype=np.float64), shape)
    sb = np.broadcast_to(np.asarray(m.sigma_bs, dtype=np.float64), shape)
    if m.sigma_atten_dir is not None:
        sa = np.maximum(sa + directions @ np.asarray(m.sigma_atten_dir, dtype=np.float64).T, 0.0)
    if m.sigma_bs_dir is not None:
        sb = np.maximum(sb + directions @ np.asarray(m.sigma_bs_dir, dtype=np.float64).T, 0.0)
    cb = np.broadcast_to(np.asarray(m.c_bs, dtype=np.float64), shape)
    return np.array(sa), np.array(sb), np.array(cb)


@dataclass
class OracleRender:
    underwater: np.ndarray  # (H, W, 3) float64
    clear: np.ndarray  # (H, W, 3) float64
    depth: np.ndarray  # (H, W) camera-frame z
    coverage: np.ndarray  # (H, W) bool, False where the ray missed every plane
    directions: np.ndarray  # (H, W, 3) unit world-frame rays

    def __iter__(self):
        return iter((self.underwater, self.clear, self.depth))


def oracle_render(spec: SceneSpec, vp: Viewpoint, _noise=None, _image=None) -> OracleRender:
    noise = _noise or _ValueNoise(spec.seed, len(spec.planes))
    image = _image
    if spec.texture.kind == "image" and image is None:
        image = read_image(spec.texture.path)
        if image.ndim == 2:
            image = np.repeat(image[..., None], 3, axis=-1)
    u, v = pixel_grid(vp.height, vp.width)
    k = vp.intrinsics
    cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    d = cam @ vp.pose.R  # world direction with unit camera-z component
    C = vp.pose.center
    best_t = np.full(u.shape, np.inf)
    best_plane = np.full(u.shape, -1, dtype=np.intp)
    hit_x = np.zeros(u.shape)
    hit_y = np.zeros(u.shape)
    for i, p in enumerate(spec.planes):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (p.depth - C[2]) / d[..., 2]
        X = C[0] + t * d[..., 0]
        Y = C[1] + t * d[..., 1]
        ok = np.isfinite(t) & (t > 0) & (X >= p.x_min) & (X < p.x_max) & (t < best_t)
        best_t = np.where(ok, t, best_t)
        best_plane = np.where(ok, i, best_plane)
        hit_x = np.where(ok, X, hit_x)
        hit_y = np.where(ok, Y, hit_y)
    coverage = best_plane >= 0
    depth = np.where(coverage, best_t, spec.background_depth)
    clear = np.broadcast_to(np.asarray(spec.background_color, dtype=np.float64), u.shape + (3,)).copy()
    for i in range(len(spec.planes)):
        sel = best_plane == i
        if np.any(sel):
            clear[sel] = _texture(spec, i, hit_x[sel], hit_y[sel], noise, image)
    dirs = d / np.linalg.norm(d, axis=-1, keepdims=True)
    sa, sb, cb = medium_coefficients(spec, dirs)
    z = depth[..., None]
    underwater = clear * np.exp(-sa * z) + cb * (1.0 - np.exp(-sb * z))
    return OracleRender(underwater, clear, depth, coverage, dirs)


def render_dataset(spec: SceneSpec) -> SceneDataset:
    """Render every camera of ``spec`` in memory (float64 images, no quantisation)."""
    noise = _ValueNoise(spec.seed, len(spec.planes))
    vps = camera_viewpoints(spec)
    renders = [oracle_render(spec, vp, noise) for vp in vps]
    near, far = _depth_range(renders)
    return SceneDataset(
        images=[r.underwater.astype(np.float32) for r in renders],
        viewpoints=vps,
        near=near,
        far=far,
        splits=["heldout" if i in spec.heldout else "train" for i in range(len(vps))],
        clear=[r.clear.astype(np.float32) for r in renders],
        depth=[r.depth.astype(np.float32) for r in renders],
        medium=medium_record(spec),
    )


def _depth_range(renders) -> tuple[float, float]:
    zmin = min(float(r.depth[r.coverage].min()) for r in renders if r.coverage.any())
    zmax = max(float(r.depth[r.coverage].max()) for r in renders if r.coverage.any())
    return round(0.8 * zmin, 6), round(1.25 * zmax, 6)


def medium_record(spec: SceneSpec) -> dict:
    m = spec.medium
    return {
        "model": "I = J*exp(-sigma_atten*z) + c_bs*(1 - exp(-sigma_bs*z))",
        "sigma_atten": [float(x) for x in m.sigma_atten],
        "sigma_bs": [float(x) for x in m.sigma_bs],
        "c_bs": [float(x) for x in m.c_bs],
        "sigma_atten_dir": m.sigma_atten_dir,
        "sigma_bs_dir": m.sigma_bs_dir,
    }


def generate_dataset(spec: SceneSpec, out_dir) -> SceneDataset:
    """Render all views to ``out_dir`` and write the manifest last.

    Files are staged in a temporary sibling directory and moved into place,
    so a failure never leaves a manifest pointing at missing files.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".synth-", dir=out_dir.parent))
    try:
        for sub in ("underwater", "clear", "depth"):
            (stage / sub).mkdir()
        noise = _ValueNoise(spec.seed, len(spec.planes))
        vps = camera_viewpoints(spec)
        renders = []
        views = []
        for i, vp in enumerate(vps):
            r = oracle_render(spec, vp, noise)
            renders.append(r)
            name = f"view_{i:03d}"
            write_image(stage / "underwater" / f"{name}.png", r.underwater, 16)
            write_image(stage / "clear" / f"{name}.png", r.clear, 16)
            write_depth(stage / "depth" / f"{name}.pfm", r.depth)
            views.append(
                ViewRecord(
                    name=name,
                    viewpoint=vp,
                    image_path=f"underwater/{name}.png",
                    clear_path=f"clear/{name}.png",
                    depth_path=f"depth/{name}.pfm",
                    split="heldout" if i in spec.heldout else "train",
                )
            )
        (stage / "medium.json").write_text(json.dumps(medium_record(spec), indent=2) + "\n")
        spec.save(stage / "scene_spec.json")
        near, far = _depth_range(renders)
        write_manifest(stage / "manifest.json", DatasetManifest(views, near, far, "medium.json"))
        out_dir.mkdir(parents=True, exist_ok=True)
        for item in sorted(stage.iterdir()):
            if item.name == "manifest.json":
                continue
            dest = out_dir / item.name
            if dest.is_dir():
                shutil.rmtree(dest)
            os.replace(item, dest)
        os.replace(stage / "manifest.json", out_dir / "manifest.json")
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return load_dataset(out_dir / "manifest.json")
