"""Pinhole camera model, ray generation and world-to-camera projection.

Conventions follow the NeRF-synthetic ``transforms.json`` files: the camera
looks down its local -z axis, +y is up and +x is right.  Pixel ``(i, j)``
(column ``i``, row ``j``) has its center at continuous coordinates
``(i + 0.5, j + 0.5)`` and the principal point is the image center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputDomainError, ValidationError

EPS_DEPTH = 1e-6
RIGID_TOL = 1e-6


def check_rigid(pose: np.ndarray, tol: float = RIGID_TOL) -> np.ndarray:
    """Return ``pose`` as a float64 4x4 array, raising if it is not rigid."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValidationError(f"pose must be 4x4, got shape {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValidationError("pose contains non-finite entries")
    rot = pose[:3, :3]
    if np.max(np.abs(rot.T @ rot - np.eye(3))) >= tol:
        raise ValidationError("pose rotation block is not orthonormal")
    if np.max(np.abs(pose[3] - (0.0, 0.0, 0.0, 1.0))) >= tol:
        raise ValidationError("pose last row must be [0, 0, 0, 1]")
    return pose


def invert_pose(pose: np.ndarray) -> np.ndarray:
    """Invert a rigid camera-to-world transform as ``[R^T | -R^T t]``."""
    pose = check_rigid(pose)
    rot = pose[:3, :3]
    inv = np.eye(4)
    inv[:3, :3] = rot.T
    inv[:3, 3] = -rot.T @ pose[:3, 3]
    return inv


@dataclass(frozen=True, eq=False)
class Camera:
    """Square-pixel pinhole camera with a camera-to-world ``pose``."""

    width: int
    height: int
    focal: float
    pose: np.ndarray
    world_to_camera: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValidationError("camera width and height must be positive")
        if not self.focal > 0:
            raise ValidationError("camera focal length must be positive")
        pose = check_rigid(self.pose).copy()
        pose.setflags(write=False)
        object.__setattr__(self, "pose", pose)
        w2c = invert_pose(pose)
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_camera", w2c)

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates (translation column of the pose)."""
        return self.pose[:3, 3]

    def scaled(self, width: int, height: int) -> "Camera":
        """Same pose, intrinsics rescaled to a new resolution."""
        return Camera(width, height, self.focal * width / self.width, self.pose)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class ProjectedPoint:
    uv: np.ndarray
    in_bounds: bool
    uv_norm: np.ndarray


def pixel_rays(camera: Camera, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ray generation.

    Args:
        camera: the viewing camera.
        u, v: arrays of continuous pixel coordinates (same shape).

    Returns:
        ``(origins, directions)`` each of shape ``u.shape + (3,)``, float64,
        directions unit length.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam_dirs = np.stack(
        [(u - camera.cx) / camera.focal, -(v - camera.cy) / camera.focal, -np.ones_like(u)],
        axis=-1,
    )
    dirs = cam_dirs @ camera.pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def image_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rays through every pixel center, row-major, shapes ``(H*W, 3)``."""
    jj, ii = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    origins, dirs = pixel_rays(camera, ii.ravel() + 0.5, jj.ravel() + 0.5)
    return origins, dirs


def ray_for_pixel(camera: Camera, u: float, v: float, t_near: float = 2.0, t_far: float = 6.0) -> Ray:
    if not (0.0 <= u < camera.width and 0.0 <= v < camera.height):
        raise InputDomainError(
            f"pixel ({u}, {v}) outside image of size {camera.width}x{camera.height}"
        )
    if not (0.0 <= t_near < t_far):
        raise InputDomainError("require 0 <= t_near < t_far")
    origins, dirs = pixel_rays(camera, np.array([u]), np.array([v]))
    return Ray(origins[0], dirs[0], float(t_near), float(t_far))


def project_points(points: np.ndarray, camera: Camera):
    """Project world points ``(..., 3)`` onto ``camera``.

    Returns ``(uv, in_bounds, uv_norm)``.  Points at or behind the camera plane
    are evaluated with their depth clamped to ``-EPS_DEPTH`` and flagged as
    out of bounds.
    """
    points = np.asarray(points, dtype=np.float64)
    w2c = camera.world_to_camera
    pc = points @ w2c[:3, :3].T + w2c[:3, 3]
    z = pc[..., 2]
    in_front = z < -EPS_DEPTH
    depth = np.where(in_front, -z, EPS_DEPTH)
    u = camera.cx + camera.focal * pc[..., 0] / depth
    v = camera.cy - camera.focal * pc[..., 1] / depth
    in_bounds = in_front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    uv = np.stack([u, v], axis=-1)
    uv_norm = np.clip(
        np.stack([2.0 * u / camera.width - 1.0, 2.0 * v / camera.height - 1.0], axis=-1),
        -1.0,
        1.0,
    )
    return uv, in_bounds, uv_norm


def project_point(x, camera: Camera) -> ProjectedPoint:
    uv, in_bounds, uv_norm = project_points(np.asarray(x, dtype=np.float64)[None], camera)
    return ProjectedPoint(uv[0], bool(in_bounds[0]), uv_norm[0])


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` looking at ``target`` (-z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along `up`; any perpendicular works
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose


def orbit_poses(n: int, radius: float = 4.0, elevation_deg: float = 30.0, start_deg: float = 0.0):
    """``n`` look-at poses evenly spaced in azimuth around the origin."""
    poses = []
    elev = np.deg2rad(elevation_deg)
    for k in range(n):
        az = np.deg2rad(start_deg) + 2.0 * np.pi * k / n
        eye = radius * np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), np.sin(elev)])
        poses.append(look_at(eye))
    return poses
