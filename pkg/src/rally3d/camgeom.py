"""Pinhole camera geometry and the table's world model.

World frame convention: origin on the floor directly below the table
center, X across the table (width), Y along the table (length), Z up.
The playing surface therefore lies in the plane z = table height.

Camera convention follows OpenCV: X right, Y down, Z forward, with
``X_cam = R @ X_world + T`` and pixel coordinates from ``K @ X_cam``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PointBehindCamera, RayParallelToPlane

# ITTF standard table dimensions (meters).
TABLE_LENGTH = 2.74
TABLE_WIDTH = 1.525
TABLE_HEIGHT = 0.76


@dataclass
class Intrinsics:
    """Square-pixel pinhole intrinsics with the principal point at the image center."""

    f: float
    width: int
    height: int
    cx: float = None  # type: ignore[assignment]
    cy: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.f, 0.0, -self.cx / self.f],
                [0.0, 1.0 / self.f, -self.cy / self.f],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass
class Pose:
    """World-to-camera rigid transform: ``X_cam = R @ X_world + T``."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"R is not orthonormal (max deviation {err:.3e})")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-9:
            raise ValueError("R must be a proper rotation (det = +1)")
        if not np.all(np.isfinite(self.camera_center)):
            raise ValueError("camera center is not finite")

    @property
    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates: ``-R^T @ T``."""
        return -self.R.T @ self.T


@dataclass
class CalibratedCamera:
    """Intrinsics plus world pose; the bridge between pixels and meters."""

    intrinsics: Intrinsics
    pose: Pose
    reprojection_rmse: float = 0.0

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix ``K @ [R | T]``."""
        RT = np.hstack([self.pose.R, self.pose.T.reshape(3, 1)])
        return self.intrinsics.K @ RT


@dataclass
class Ray:
    """World-frame ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-12:
            self.direction = self.direction / n


@dataclass
class TableModel:
    """Table geometry in the world frame.

    Corners are ordered counterclockwise seen from above, starting at
    (-width/2, -length/2). The midline runs along the table length at
    x = 0; its "front" endpoint is at y = -length/2.
    """

    length: float = TABLE_LENGTH
    width: float = TABLE_WIDTH
    height: float = TABLE_HEIGHT
    corners: np.ndarray = field(init=False)
    midline: np.ndarray = field(init=False)
    plane_normal: np.ndarray = field(init=False)
    plane_point: np.ndarray = field(init=False)

    def __post_init__(self):
        hw, hl, z = self.width / 2.0, self.length / 2.0, self.height
        self.corners = np.array(
            [
                [-hw, -hl, z],
                [hw, -hl, z],
                [hw, hl, z],
                [-hw, hl, z],
            ]
        )
        self.midline = np.array([[0.0, -hl, z], [0.0, hl, z]])
        self.plane_normal = np.array([0.0, 0.0, 1.0])
        self.plane_point = np.array([0.0, 0.0, z])

    @property
    def features(self) -> np.ndarray:
        """All 6 calibration features: 4 corners then 2 midline endpoints."""
        return np.vstack([self.corners, self.midline])

    def contains_xy(self, point: np.ndarray, margin: float = 0.0) -> bool:
        x, y = float(point[0]), float(point[1])
        return (
            abs(x) <= self.width / 2.0 + margin
            and abs(y) <= self.length / 2.0 + margin
        )


def project_points(cam: CalibratedCamera, Xw: np.ndarray) -> np.ndarray:
    """Project (N, 3) world points to (N, 2) pixels.

    Raises PointBehindCamera if any point has non-positive depth.
    """
    Xw = np.atleast_2d(np.asarray(Xw, dtype=np.float64))
    Xc = Xw @ cam.pose.R.T + cam.pose.T
    depth = Xc[:, 2]
    if np.any(depth <= 0):
        raise PointBehindCamera(
            f"{int(np.sum(depth <= 0))} point(s) at non-positive depth"
        )
    intr = cam.intrinsics
    u = intr.f * Xc[:, 0] / depth + intr.cx
    v = intr.f * Xc[:, 1] / depth + intr.cy
    return np.stack([u, v], axis=1)


def project(cam: CalibratedCamera, Xw: np.ndarray) -> np.ndarray:
    """Project a single world point to pixel coordinates (u, v)."""
    return project_points(cam, np.asarray(Xw).reshape(1, 3))[0]


def pixel_ray(cam: CalibratedCamera, u: float, v: float) -> Ray:
    """Back-project a pixel into a world-frame ray through the camera center."""
    d_cam = cam.intrinsics.K_inv @ np.array([u, v, 1.0])
    d_world = cam.pose.R.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=cam.pose.camera_center, direction=d_world)


def intersect_ray_plane(
    ray: Ray, normal: np.ndarray, plane_point: np.ndarray
) -> np.ndarray:
    """Intersect a ray with the plane ``(X - plane_point) . normal = 0``."""
    normal = np.asarray(normal, dtype=np.float64).reshape(3)
    plane_point = np.asarray(plane_point, dtype=np.float64).reshape(3)
    denom = float(ray.direction @ normal)
    if abs(denom) <= 1e-9:
        raise RayParallelToPlane(f"|direction . normal| = {abs(denom):.3e}")
    s = float((plane_point - ray.origin) @ normal) / denom
    return ray.origin + s * ray.direction
