import numpy as np
import pytest

from mf3d.camera import (CameraPose, Intrinsics, default_intrinsics, fit_rig_to_model,
                         load_rig, make_ring_rig, project, project_points, rig_from_json,
                         rig_to_json, save_rig, unproject)
from mf3d.errors import UsageError
from mf3d.geom import PointSet, RigidTransform


INTR = default_intrinsics()


def identity_pose(view=1, intr=INTR):
    return CameraPose(intr, RigidTransform.identity(), view)


class TestIntrinsics:
    def test_rejects_negative_focal(self):
        with pytest.raises(ValueError):
            Intrinsics(-1.0, 1.0, 0.0, 0.0, 10, 10)

    def test_principal_point_inside(self):
        with pytest.raises(ValueError):
            Intrinsics(1.0, 1.0, 10.0, 0.0, 10, 10)


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        pose = identity_pose()
        u, v, z = project([0.0, 0.0, 2.5], pose)
        assert (u, v, z) == (INTR.cx, INTR.cy, 2.5)

    def test_unit_offset_lands_one_focal_away(self):
        intr = Intrinsics(500.0, 500.0, 256.0, 256.0, 512, 512)
        pose = identity_pose(intr=intr)
        u, v, z = project([1.0, 0.0, 1.0], pose)
        assert u == pytest.approx(756.0)
        assert v == pytest.approx(256.0)

    def test_behind_camera_marker(self):
        assert project([0.0, 0.0, -1.0], identity_pose()) is None
        assert project([0.0, 0.0, 0.0], identity_pose()) is None

    def test_unproject_principal_point(self):
        out = unproject(INTR.cx, INTR.cy, 1.0, identity_pose())
        np.testing.assert_allclose(out, [0.0, 0.0, 1.0])

    def test_unproject_one_focal_offset(self):
        out = unproject(INTR.cx + INTR.fx, INTR.cy, 2.0, identity_pose())
        np.testing.assert_allclose(out, [2.0, 0.0, 2.0])

    def test_unproject_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            unproject(0.0, 0.0, 0.0, identity_pose())

    def test_round_trip_10k_points(self):
        rng = np.random.default_rng(21)
        poses = make_ring_rig(4, [0.2, -0.1, 0.3], 2.0, [0.0, 1.0, 0.0], INTR, 15.0)
        pose = poses[2]
        n = 10_000
        us = rng.uniform(0, INTR.width, n)
        vs = rng.uniform(0, INTR.height, n)
        zs = rng.uniform(0.5, 5.0, n)
        world = unproject(us, vs, zs, pose)
        uv, z, valid = project_points(world, pose)
        assert valid.all()
        assert np.abs(uv[:, 0] - us).max() < 1e-6
        assert np.abs(uv[:, 1] - vs).max() < 1e-6
        world2 = unproject(uv[:, 0], uv[:, 1], z, pose)
        assert np.linalg.norm(world2 - world, axis=1).max() < 1e-6


class TestRing:
    def test_single_view_looks_at_center(self):
        center = np.array([1.0, 2.0, 3.0])
        [pose] = make_ring_rig(1, center, 2.0, [0, 1, 0], INTR, 0.0)
        cam = pose.world_to_cam.apply(center)
        np.testing.assert_allclose(cam, [0.0, 0.0, 2.0], atol=1e-12)

    def test_four_views_are_90_degrees_apart(self):
        center = np.zeros(3)
        poses = make_ring_rig(4, center, 3.0, [0, 1, 0], INTR, 0.0)
        dirs = [(p.position - center) / 3.0 for p in poses]
        for a, b in zip(dirs, dirs[1:]):
            assert abs(a @ b) < 1e-12
        assert dirs[0] @ dirs[2] == pytest.approx(-1.0)

    def test_eight_views_center_on_axis(self):
        center = np.array([0.5, -0.2, 0.1])
        poses = make_ring_rig(8, center, 1.7, [0, 1, 0], INTR, 10.0)
        for pose in poses:
            cam = pose.world_to_cam.apply(center)
            assert abs(cam[0]) < 1e-9
            assert abs(cam[1]) < 1e-9
            assert abs(cam[2] - 1.7) < 1e-9

    def test_rotation_orthonormal(self):
        for pose in make_ring_rig(8, np.zeros(3), 1.0, [0, 1, 0], INTR, -20.0):
            r = pose.world_to_cam.rotation
            assert np.abs(r @ r.T - np.eye(3)).max() < 1e-9

    def test_cyclic_relabeling(self):
        # Rotating every azimuth by 360/V permutes the camera positions.
        poses = make_ring_rig(6, np.zeros(3), 2.0, [0, 1, 0], INTR, 5.0)
        positions = np.stack([p.position for p in poses])
        shifted = np.roll(positions, -1, axis=0)
        rot = make_ring_rig(6, np.zeros(3), 2.0, [0, 1, 0], INTR, 5.0)
        # closing the loop: pose k+1 of the original equals pose k shifted
        np.testing.assert_allclose(shifted[:-1], positions[1:], atol=1e-9)
        np.testing.assert_allclose(
            np.stack([p.position for p in rot]), positions, atol=0
        )

    def test_world_up_maps_to_image_up(self):
        # A point above the center must land above the principal point (v < cy).
        [pose] = make_ring_rig(1, np.zeros(3), 2.0, [0, 1, 0], INTR, 0.0)
        u, v, _ = project([0.0, 0.3, 0.0], pose)
        assert v < INTR.cy

    def test_bad_inputs(self):
        with pytest.raises(UsageError):
            make_ring_rig(0, np.zeros(3), 1.0, [0, 1, 0], INTR)
        with pytest.raises(UsageError):
            make_ring_rig(4, np.zeros(3), 0.0, [0, 1, 0], INTR)
        with pytest.raises(ValueError):
            make_ring_rig(4, np.zeros(3), 1.0, [0, 0, 0], INTR)


class TestFitRig:
    def test_unit_sphere_projects_inside(self):
        rng = np.random.default_rng(22)
        pts = rng.normal(size=(500, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        cloud = PointSet(pts)
        for pose in fit_rig_to_model(cloud, 8, INTR, elevation_deg=12.0):
            uv, _, valid = project_points(cloud.positions, pose)
            assert valid.all()
            assert (uv[:, 0] >= 0).all() and (uv[:, 0] < INTR.width).all()
            assert (uv[:, 1] >= 0).all() and (uv[:, 1] < INTR.height).all()

    def test_translation_equivariance(self):
        rng = np.random.default_rng(23)
        pts = rng.normal(size=(100, 3))
        shift = np.array([5.0, -2.0, 1.0])
        rig_a = fit_rig_to_model(PointSet(pts), 4, INTR)
        rig_b = fit_rig_to_model(PointSet(pts + shift), 4, INTR)
        for a, b in zip(rig_a, rig_b):
            np.testing.assert_allclose(b.position, a.position + shift, atol=1e-9)

    def test_single_point_degenerate(self):
        with pytest.raises(UsageError, match="degenerate extent"):
            fit_rig_to_model(PointSet(np.zeros((1, 3))), 4, INTR)


class TestRigSerialization:
    def test_json_round_trip(self, tmp_path):
        poses = make_ring_rig(3, [0.1, 0.2, 0.3], 1.5, [0, 1, 0], INTR, 30.0)
        doc = rig_to_json(poses)
        back = rig_from_json(doc)
        for a, b in zip(poses, back):
            assert a.view_index == b.view_index
            np.testing.assert_array_equal(a.world_to_cam.rotation, b.world_to_cam.rotation)
            np.testing.assert_array_equal(a.world_to_cam.translation, b.world_to_cam.translation)
            assert a.intrinsics == b.intrinsics

    def test_file_round_trip(self, tmp_path):
        poses = make_ring_rig(2, np.zeros(3), 1.0, [0, 1, 0], INTR)
        save_rig(poses, tmp_path / "rig.json")
        back = load_rig(tmp_path / "rig.json")
        assert len(back) == 2
        np.testing.assert_array_equal(back[1].world_to_cam.rotation,
                                      poses[1].world_to_cam.rotation)
