import numpy as np
import pytest

from umami.geometry import (
    CameraPose,
    GeometryError,
    PosedImage,
    look_at_pose,
    pixel_ray,
    plucker_grid,
    project_point,
    ray_grid,
)
from umami.rng import np_generator

from helpers import canonical_pose, random_pose


class TestCameraPose:
    def test_rejects_non_orthonormal_rotation(self):
        r = np.eye(3)
        r[0, 1] = 0.01
        with pytest.raises(GeometryError):
            CameraPose(r, np.zeros(3), (1.0, 1.0), (0.0, 0.0), (4, 4))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(GeometryError):
            CameraPose(r, np.zeros(3), (1.0, 1.0), (0.0, 0.0), (4, 4))

    def test_rejects_bad_focal_and_resolution(self):
        with pytest.raises(GeometryError):
            CameraPose(np.eye(3), np.zeros(3), (-1.0, 1.0), (0.0, 0.0), (4, 4))
        with pytest.raises(GeometryError):
            CameraPose(np.eye(3), np.zeros(3), (1.0, 1.0), (0.0, 0.0), (0, 4))

    def test_record_round_trip_is_exact(self):
        rng = np_generator(0, "pose-record")
        for _ in range(10):
            pose = random_pose(rng)
            back = CameraPose.from_record(pose.to_record())
            assert np.array_equal(back.rotation, pose.rotation)
            assert np.array_equal(back.translation, pose.translation)
            assert back.focal == pose.focal
            assert back.principal_point == pose.principal_point
            assert back.resolution == pose.resolution

    def test_posed_image_requires_matching_resolution(self):
        pose = canonical_pose((8, 8))
        with pytest.raises(GeometryError):
            PosedImage(np.zeros((4, 8, 3), dtype=np.float32), pose)


class TestPixelRay:
    def test_optical_axis_pixel_of_canonical_camera(self):
        # principal point at the center of pixel (0, 0)
        pose = CameraPose(np.eye(3), np.zeros(3), (1.0, 1.0), (0.5, 0.5), (4, 4))
        origin, d = pixel_ray(pose, 0, 0)
        assert np.allclose(d, [0, 0, 1], atol=1e-15)
        assert np.array_equal(origin, np.zeros(3))

    def test_origin_is_camera_center(self):
        pose = CameraPose(np.eye(3), np.array([1.0, 2.0, 3.0]), (2.0, 2.0), (2.0, 2.0), (4, 4))
        for u, v in [(0, 0), (3, 3), (2, 1)]:
            origin, _ = pixel_ray(pose, u, v)
            assert np.array_equal(origin, [1.0, 2.0, 3.0])

    def test_hand_evaluated_pinhole_direction(self):
        # 4x4 image, fx=fy=2, cx=cy=2, pixel (3,1):
        # ((3.5-2)/2, (1.5-2)/2, 1) = (0.75, -0.25, 1), then normalized
        pose = CameraPose(np.eye(3), np.zeros(3), (2.0, 2.0), (2.0, 2.0), (4, 4))
        _, d = pixel_ray(pose, 3, 1)
        expect = np.array([0.75, -0.25, 1.0])
        expect /= np.linalg.norm(expect)
        assert np.allclose(d, expect, atol=1e-15)

    def test_out_of_bounds_pixel_rejected(self):
        pose = canonical_pose((4, 4))
        for u, v in [(-1, 0), (0, -1), (4, 0), (0, 4)]:
            with pytest.raises(GeometryError):
                pixel_ray(pose, u, v)

    def test_grid_matches_per_pixel_rays(self):
        rng = np_generator(1, "ray-grid")
        pose = random_pose(rng, (6, 5))
        grid = ray_grid(pose)
        for v in range(5):
            for u in range(6):
                _, d = pixel_ray(pose, u, v)
                assert np.allclose(grid[v, u], d, atol=1e-14)


class TestPlucker:
    def test_moment_zero_for_camera_at_origin(self):
        pose = CameraPose(np.eye(3), np.zeros(3), (4.0, 4.0), (2.0, 2.0), (4, 4))
        grid = plucker_grid(pose)
        assert np.allclose(grid.moments, 0.0, atol=1e-15)

    def test_hand_computed_moment(self):
        # camera at (0,1,0) with identity rotation: center ray direction (0,0,1)
        # moment = (0,1,0) x (0,0,1) = (1,0,0)
        pose = CameraPose(np.eye(3), np.array([0.0, 1.0, 0.0]), (2.0, 2.0), (0.5, 0.5), (2, 2))
        _, d = pixel_ray(pose, 0, 0)   # pixel center (0.5, 0.5) = principal point
        assert np.allclose(d, [0, 0, 1], atol=1e-15)
        grid = plucker_grid(pose)
        assert np.allclose(grid.moments[0, 0], [1.0, 0.0, 0.0], atol=1e-15)

    def test_slide_invariance_along_ray(self):
        rng = np_generator(2, "plucker-slide")
        for _ in range(20):
            pose = random_pose(rng)
            grid = plucker_grid(pose)
            u = int(rng.integers(0, pose.width))
            v = int(rng.integers(0, pose.height))
            o, d = pixel_ray(pose, u, v)
            alpha = rng.uniform(-10, 10)
            m2 = np.cross(o + alpha * d, d)
            assert np.abs(m2 - grid.moments[v, u]).max() < 1e-6
            assert np.abs(d - grid.directions[v, u]).max() < 1e-6

    def test_moment_orthogonal_to_direction_everywhere(self):
        rng = np_generator(3, "plucker-orth")
        for _ in range(10):
            grid = plucker_grid(random_pose(rng, (7, 9)))
            dots = np.abs((grid.directions * grid.moments).sum(-1))
            assert dots.max() < 1e-6

    def test_unit_directions(self):
        rng = np_generator(4, "plucker-unit")
        grid = plucker_grid(random_pose(rng, (9, 4)))
        norms = np.linalg.norm(grid.directions, axis=-1)
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_deterministic_bit_identical(self):
        rng = np_generator(5, "plucker-det")
        pose = random_pose(rng)
        a = plucker_grid(pose)
        b = plucker_grid(pose)
        assert np.array_equal(a.directions, b.directions)
        assert np.array_equal(a.moments, b.moments)


class TestProjection:
    def test_project_inverts_pixel_ray(self):
        rng = np_generator(6, "project")
        for _ in range(20):
            pose = random_pose(rng)
            u = int(rng.integers(0, pose.width))
            v = int(rng.integers(0, pose.height))
            o, d = pixel_ray(pose, u, v)
            depth = rng.uniform(0.5, 5.0)
            point = o + depth * d
            pu, pv, z = project_point(pose, point)
            assert z > 0
            assert abs(pu - (u + 0.5)) < 1e-9
            assert abs(pv - (v + 0.5)) < 1e-9

    def test_behind_camera_flagged(self):
        pose = canonical_pose((4, 4), distance=3.0)
        _, _, z = project_point(pose, np.array([0.0, 0.0, -10.0]))
        assert z <= 0


class TestLookAt:
    def test_look_at_points_camera_at_target(self):
        pose = look_at_pose(np.array([2.0, 1.0, 2.0]), np.zeros(3), (8, 8), (8.0, 8.0))
        # target projects to the principal point
        u, v, z = project_point(pose, np.zeros(3))
        assert z > 0
        assert abs(u - 4.0) < 1e-9 and abs(v - 4.0) < 1e-9

    def test_proper_rotation(self):
        rng = np_generator(7, "look-at")
        for _ in range(10):
            pos = rng.normal(scale=3.0, size=3)
            pose = look_at_pose(pos, rng.normal(scale=0.2, size=3), (4, 4), (4.0, 4.0))
            assert abs(np.linalg.det(pose.rotation) - 1.0) < 1e-9
