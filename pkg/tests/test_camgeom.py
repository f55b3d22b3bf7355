"""Projection, ray and plane geometry checks against hand-computed values."""

import numpy as np
import pytest

from rally3d.camgeom import (
    CalibratedCamera,
    Intrinsics,
    Pose,
    Ray,
    TableModel,
    intersect_ray_plane,
    pixel_ray,
    project,
    project_points,
)
from rally3d.errors import PointBehindCamera, RayParallelToPlane


def lookat_pose(eye, target, up=(0, 0, 1)):
    """Camera pose looking from eye toward target (OpenCV axes: z forward)."""
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.vstack([right, down, fwd])
    return Pose(R=R, T=-R @ eye)


def random_camera(rng):
    eye = rng.uniform([-4, -4, 1.0], [4, 4, 3.0])
    target = rng.uniform([-0.5, -0.5, 0.5], [0.5, 0.5, 1.0])
    f = rng.uniform(800, 2500)
    return CalibratedCamera(
        intrinsics=Intrinsics(f=f, width=1280, height=720),
        pose=lookat_pose(eye, target),
    )


class TestProjection:
    def test_optical_axis_point_maps_to_principal_point(self):
        cam = CalibratedCamera(
            Intrinsics(f=1000, width=1280, height=720),
            Pose(R=np.eye(3), T=np.array([0.0, 0.0, 5.0])),
        )
        uv = project(cam, np.array([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(uv, [640.0, 360.0], atol=1e-12)

    def test_offset_point(self):
        # u = cx + f*X/Z = 640 + 1000*0.5/5 = 740
        cam = CalibratedCamera(
            Intrinsics(f=1000, width=1280, height=720),
            Pose(R=np.eye(3), T=np.array([0.0, 0.0, 5.0])),
        )
        uv = project(cam, np.array([0.5, 0.0, 0.0]))
        np.testing.assert_allclose(uv, [740.0, 360.0], atol=1e-12)

    def test_matches_homogeneous_matrix_oracle(self):
        # independent 4x4 homogeneous pipeline: x ~ K [R|T] X
        rng = np.random.default_rng(7)
        for _ in range(50):
            cam = random_camera(rng)
            X = rng.uniform([-1, -1, 0], [1, 1, 2])
            M = np.eye(4)
            M[:3, :3] = cam.pose.R
            M[:3, 3] = cam.pose.T
            Xh = M @ np.append(X, 1.0)
            xh = cam.intrinsics.K @ Xh[:3]
            expected = xh[:2] / xh[2]
            np.testing.assert_allclose(project(cam, X), expected, atol=1e-9)

    def test_point_behind_camera_raises(self):
        cam = CalibratedCamera(
            Intrinsics(f=1000, width=1280, height=720),
            Pose(R=np.eye(3), T=np.array([0.0, 0.0, 5.0])),
        )
        with pytest.raises(PointBehindCamera):
            project(cam, np.array([0.0, 0.0, -6.0]))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        cam = random_camera(rng)
        pts = rng.uniform([-1, -1, 0], [1, 1, 1.5], size=(20, 3))
        batch = project_points(cam, pts)
        for i in range(20):
            np.testing.assert_allclose(batch[i], project(cam, pts[i]), atol=1e-12)


class TestPixelRay:
    def test_principal_ray(self):
        cam = CalibratedCamera(
            Intrinsics(f=1000, width=1280, height=720),
            Pose(R=np.eye(3), T=np.array([0.0, 0.0, 5.0])),
        )
        ray = pixel_ray(cam, 640.0, 360.0)
        np.testing.assert_allclose(ray.origin, [0, 0, -5], atol=1e-12)
        np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-12)

    def test_project_then_ray_passes_through_point(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            cam = random_camera(rng)
            X = rng.uniform([-1, -1, 0], [1, 1, 2])
            u, v = project(cam, X)
            ray = pixel_ray(cam, u, v)
            # distance from X to the ray
            d = X - ray.origin
            dist = np.linalg.norm(d - (d @ ray.direction) * ray.direction)
            assert dist < 1e-9

    def test_ray_reprojection_round_trip(self):
        rng = np.random.default_rng(19)
        cam = random_camera(rng)
        for _ in range(100):
            u, v = rng.uniform([0, 0], [1280, 720])
            ray = pixel_ray(cam, u, v)
            X = ray.origin + 3.0 * ray.direction
            np.testing.assert_allclose(project(cam, X), [u, v], atol=1e-6)


class TestRayPlane:
    def test_straight_drop(self):
        ray = Ray(origin=np.array([0.0, 0.0, 1.0]), direction=np.array([0.0, 0.0, -1.0]))
        X = intersect_ray_plane(ray, np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(X, [0, 0, 0], atol=1e-12)

    def test_radius_offset_plane(self):
        ray = Ray(origin=np.array([1.0, 1.0, 2.0]), direction=np.array([0.0, 0.0, -1.0]))
        X = intersect_ray_plane(
            ray, np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 0.02])
        )
        np.testing.assert_allclose(X, [1, 1, 0.02], atol=1e-12)

    def test_residual_satisfies_plane_equation(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            origin = rng.uniform(-5, 5, 3)
            direction = rng.normal(size=3)
            normal = rng.normal(size=3)
            normal /= np.linalg.norm(normal)
            plane_point = rng.uniform(-2, 2, 3)
            if abs(direction @ normal) / np.linalg.norm(direction) < 1e-3:
                continue
            X = intersect_ray_plane(Ray(origin, direction), normal, plane_point)
            assert abs((X - plane_point) @ normal) < 1e-12

    def test_parallel_ray_raises(self):
        ray = Ray(origin=np.array([0.0, 0.0, 1.0]), direction=np.array([1.0, 0.0, 0.0]))
        with pytest.raises(RayParallelToPlane):
            intersect_ray_plane(ray, np.array([0.0, 0.0, 1.0]), np.zeros(3))


class TestTableModel:
    def test_corner_layout(self):
        table = TableModel()
        corners = table.corners
        assert corners.shape == (4, 3)
        # all on the playing surface, +-half extents
        np.testing.assert_allclose(corners[:, 2], 0.76)
        assert set(np.round(np.abs(corners[:, 0]), 4)) == {0.7625}
        assert set(np.round(np.abs(corners[:, 1]), 4)) == {1.37}

    def test_midline_on_surface(self):
        table = TableModel()
        mid = table.midline
        np.testing.assert_allclose(mid[:, 0], 0.0, atol=1e-12)
        np.testing.assert_allclose(np.abs(mid[:, 1]), 1.37)
        np.testing.assert_allclose(mid[:, 2], 0.76)

    def test_features_are_corners_plus_midline(self):
        table = TableModel()
        assert table.features.shape == (6, 3)
        np.testing.assert_allclose(table.features[:4], table.corners)

    def test_contains_xy(self):
        table = TableModel()
        assert table.contains_xy(np.array([0.0, 0.0, 0.76]))
        assert not table.contains_xy(np.array([1.0, 0.0, 0.76]))
        assert table.contains_xy(np.array([1.0, 0.0, 0.76]), margin=0.5)


class TestValidation:
    def test_non_orthonormal_rotation_rejected(self):
        R = np.eye(3)
        R[0, 0] = 1.1
        with pytest.raises(ValueError):
            Pose(R=R, T=np.zeros(3))

    def test_reflection_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(R=R, T=np.zeros(3))

    def test_intrinsics_principal_point_defaults_to_center(self):
        intr = Intrinsics(f=1000, width=1280, height=720)
        assert intr.cx == 640.0 and intr.cy == 360.0

    def test_camera_center(self):
        rng = np.random.default_rng(5)
        cam = random_camera(rng)
        C = cam.pose.camera_center
        np.testing.assert_allclose(cam.pose.R @ C + cam.pose.T, 0.0, atol=1e-12)
