"""Pinhole cameras, rigid poses and point-map reprojection.

Conventions: poses map world to camera (``x_cam = R @ x_world + t``), the
camera looks down +Z with +X right and +Y down, and pixel ``(u, v)`` is the
centre of column ``u`` / row ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Points with camera depth at or below this are treated as not visible.
MIN_DEPTH = 1e-9


class NotVisibleError(ValueError):
    """Raised when a point lies on or behind the camera plane."""


@dataclass(frozen=True)
class SE3Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "SE3Pose":
        """Camera at ``eye`` looking at ``target``; ``up`` is world up (default -Y)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("look_at direction is parallel to up vector")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])  # rows: camera axes in world coords
        rot = _reorthonormalize(rot)
        return cls(rot, -rot @ eye)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def scaled(self, s: float) -> "SE3Pose":
        """Same camera after scaling the world about the origin by ``s``."""
        return SE3Pose(self.rotation, self.translation * s)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rotation.ravel(), self.translation])


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class PointMap:
    """Per-pixel world coordinates (H, W, 3) and validity mask (H, W)."""

    coords: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.coords.shape[:2] != self.valid.shape or self.coords.shape[-1] != 3:
            raise ValueError(f"point map shape {self.coords.shape} does not match mask {self.valid.shape}")
        if not np.all(np.isfinite(self.coords[self.valid])):
            raise ValueError("point map has non-finite coordinates at valid pixels")


def project_points(points, pose: SE3Pose, intr: CameraIntrinsics):
    """Vectorised projection of ``(..., 3)`` world points.

    Returns ``(uv, depth, visible)``; ``uv`` is NaN where not visible.
    """
    cam = pose.to_camera(points)
    z = cam[..., 2]
    visible = z > MIN_DEPTH
    safe_z = np.where(visible, z, 1.0)
    u = intr.fx * cam[..., 0] / safe_z + intr.cx
    v = intr.fy * cam[..., 1] / safe_z + intr.cy
    uv = np.stack([u, v], axis=-1)
    uv[~visible] = np.nan
    return uv, z, visible


def project(p, pose: SE3Pose, intr: CameraIntrinsics) -> tuple[float, float, float]:
    """Project a single world point; raises NotVisibleError behind the camera."""
    uv, depth, visible = project_points(np.asarray(p, dtype=np.float64), pose, intr)
    if not visible:
        raise NotVisibleError(f"point {p} has camera depth {float(depth):.3g}")
    return float(uv[0]), float(uv[1]), float(depth)


def unproject_points(uv, depth, pose: SE3Pose, intr: CameraIntrinsics) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    x = (uv[..., 0] - intr.cx) / intr.fx * depth
    y = (uv[..., 1] - intr.cy) / intr.fy * depth
    return pose.to_world(np.stack([x, y, depth], axis=-1))


def unproject(u: float, v: float, depth: float, pose: SE3Pose, intr: CameraIntrinsics) -> np.ndarray:
    return unproject_points(np.array([u, v]), np.array(depth), pose, intr)


def pixel_rays(pose: SE3Pose, intr: CameraIntrinsics, uv=None):
    """World-space ray origins and unit directions through pixel centres.

    With ``uv=None`` the full (H, W) grid is used.
    """
    if uv is None:
        vv, uu = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
        uv = np.stack([uu, vv], axis=-1)
    uv = np.asarray(uv, dtype=np.float64)
    d_cam = np.stack(
        [(uv[..., 0] - intr.cx) / intr.fx, (uv[..., 1] - intr.cy) / intr.fy, np.ones(uv.shape[:-1])], axis=-1
    )
    d_world = d_cam @ pose.rotation  # R^T d
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = np.broadcast_to(pose.center, d_world.shape)
    return origin, d_world


def pairwise_sq_dist(a, b) -> np.ndarray:
    """Squared Euclidean distances between rows of ``a`` (n, 3) and ``b`` (m, 3)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("pairwise_sq_dist needs nonempty inputs")
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def reproject_frame(src: int, dst: int, sample):
    """Warp every pixel of frame ``src`` into frame ``dst`` using its point map.

    Returns ``(warp, mask)`` where ``warp`` is (H, W, 2) pixel coordinates in
    ``dst`` and ``mask`` flags pixels whose point is valid, in front of the
    destination camera and inside its image bounds.
    """
    pm = sample.pointmaps[src]
    pose, intr = sample.cameras[dst]
    uv, _, visible = project_points(pm.coords.astype(np.float64), pose, intr)
    with np.errstate(invalid="ignore"):
        inside = (
            (uv[..., 0] >= -0.5)
            & (uv[..., 0] <= intr.width - 0.5)
            & (uv[..., 1] >= -0.5)
            & (uv[..., 1] <= intr.height - 0.5)
        )
    mask = pm.valid & visible & inside
    return uv, mask
