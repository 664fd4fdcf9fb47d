"""Pinhole cameras, plane-induced homographies and image resampling.

Conventions
-----------
* Poses are world-to-camera: ``x_cam = R @ X_world + t``.
* Pixel centres sit on integer coordinates, origin top-left, +u right,
  +v down.
* Geometry is computed in float64; resampled payloads are returned as
  float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image decimated by ``1/factor`` (pixel u' = u * factor)."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor)


@dataclass(frozen=True, eq=False)
class CameraPose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise DomainError("rotation is not orthonormal")
        if np.linalg.det(R) <= 0:
            raise DomainError("rotation has negative determinant")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, center, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Pose of a camera at ``center`` whose +z axis points at ``target``.

        ``up`` is the world direction that should appear as image-up (-v).
        """
        center = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - center
        z /= np.linalg.norm(z)
        x = np.cross(-np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])  # rows are camera axes in world frame
        return cls(R, -R @ center)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def principal_axis(self) -> np.ndarray:
        """Camera +z axis expressed in world coordinates (third row of R)."""
        return self.R[2].copy()

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.R.tobytes(), self.t.tobytes()))


@dataclass(frozen=True)
class Viewpoint:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    width: int
    height: int

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise DomainError(f"viewpoint must be at least 8x8, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def downscaled(self, level: int) -> "Viewpoint":
        """Viewpoint of the image decimated ``level`` times by a factor of 2."""
        f = 0.5**level
        return Viewpoint(
            self.intrinsics.scaled(f),
            self.pose,
            int(np.ceil(self.width * f)),
            int(np.ceil(self.height * f)),
        )


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel-centre coordinates ``(u, v)``, each of shape (H, W)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def homography(src: Viewpoint, tgt: Viewpoint, z: float) -> np.ndarray:
    """Map target pixels lying on the fronto-parallel plane at depth ``z`` to source pixels.

    ``H @ [u, v, 1]`` (after homogeneous division) is the source pixel that
    observes the same point as target pixel ``(u, v)`` at target depth ``z``.
    """
    z = float(z)
    if not z > 0:
        raise DomainError(f"plane depth must be positive, got {z}")
    Ks, Kt = src.intrinsics.K, tgt.intrinsics.K
    if abs(np.linalg.det(Ks)) < 1e-12 or abs(np.linalg.det(Kt)) < 1e-12:
        raise DomainError("singular intrinsics")
    Rs, ts = src.pose.R, src.pose.t
    Rt, tt = tgt.pose.R, tgt.pose.t
    baseline = Rs.T @ ts - Rt.T @ tt
    normal = tgt.pose.principal_axis  # plane normal in world frame
    H = Ks @ Rs @ (np.eye(3) + np.outer(baseline, normal) / z) @ Rt.T @ tgt.intrinsics.K_inv
    if H[2, 2] != 0:
        H = H / H[2, 2]
    return H


def apply_homography(H: np.ndarray, u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = H[0, 0] * u + H[0, 1] * v + H[0, 2]
    y = H[1, 0] * u + H[1, 1] * v + H[1, 2]
    w = H[2, 0] * u + H[2, 1] * v + H[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return x / w, y / w


def bilinear_sample(image: np.ndarray, x, y, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Sample an (h, w[, F]) array at float coordinates.

    Coordinates outside ``[0, w-1] x [0, h-1]`` (or non-finite) give zeros
    and ``valid = False``.  Returns ``(values, valid)`` where ``values`` has
    shape ``x.shape + image.shape[2:]``.
    """
    img = np.asarray(image)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = np.isfinite(x) & np.isfinite(y) & (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out = np.where(valid[..., None], out, 0.0).astype(dtype)
    if squeeze:
        out = out[..., 0]
    return out, valid


def warp_map(feature_map: np.ndarray, H: np.ndarray, out_shape=None):
    """Resample ``feature_map`` onto the target grid through homography ``H``.

    Output pixel ``(u, v)`` takes the bilinear sample at ``H @ [u, v, 1]``.
    ``out_shape`` (height, width) defaults to the input's spatial shape.
    Returns ``(warped, mask)``.
    """
    fmap = np.asarray(feature_map)
    h, w = out_shape if out_shape is not None else fmap.shape[:2]
    u, v = pixel_grid(h, w)
    x, y = apply_homography(H, u, v)
    return bilinear_sample(fmap, x, y)


def warp_map_depth(feature_map: np.ndarray, src: Viewpoint, tgt: Viewpoint, depth: np.ndarray):
    """Like :func:`warp_map` but with a per-pixel target depth (H, W)."""
    depth = np.asarray(depth, dtype=np.float64)
    u, v = pixel_grid(*depth.shape)
    X = unproject(tgt, np.stack([u, v], axis=-1), depth)
    uv, _ = project(src, X, strict=False)
    return bilinear_sample(feature_map, uv[..., 0], uv[..., 1])


def unproject(vp: Viewpoint, pixel, z) -> np.ndarray:
    """World point whose camera-frame depth is ``z`` at ``pixel`` = (..., 2)."""
    pixel = np.asarray(pixel, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise DomainError("unproject needs positive depth")
    k = vp.intrinsics
    xc = (pixel[..., 0] - k.cx) / k.fx * z
    yc = (pixel[..., 1] - k.cy) / k.fy * z
    cam = np.stack([xc, yc, np.broadcast_to(z, xc.shape)], axis=-1)
    R, t = vp.pose.R, vp.pose.t
    return (cam - t) @ R  # R^T (x - t), row-vector form


def project(vp: Viewpoint, X, strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of world points (..., 3).

    Returns ``(uv, z)``; negative ``z`` (behind the camera) is reported, not
    clamped.  With ``strict`` a point at exactly ``z = 0`` raises.
    """
    X = np.asarray(X, dtype=np.float64)
    cam = X @ vp.pose.R.T + vp.pose.t
    z = cam[..., 2]
    if strict and np.any(z == 0):
        raise DomainError("degenerate projection: point on the camera plane (z = 0)")
    k = vp.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[..., 0] / z + k.cx
        v = k.fy * cam[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1), z


def ray_directions(vp: Viewpoint, pixels=None) -> np.ndarray:
    """Unit world-frame viewing directions, (H, W, 3) or (..., 3) for given pixels."""
    if pixels is None:
        u, v = pixel_grid(vp.height, vp.width)
    else:
        pixels = np.asarray(pixels, dtype=np.float64)
        u, v = pixels[..., 0], pixels[..., 1]
    k = vp.intrinsics
    cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    world = cam @ vp.pose.R  # R^T d
    return world / np.linalg.norm(world, axis=-1, keepdims=True)
