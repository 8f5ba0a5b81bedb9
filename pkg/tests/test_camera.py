import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from autopark import camera as c
from autopark import world as w
from autopark.camera import CameraExtrinsics, CameraIntrinsics, project, project_points, unproject

RIG = c.default_rig()


def homogeneous_project(p_world, intr, extr, pose):
    """Independent oracle: K [R|t] T_ego^-1 p in homogeneous coordinates."""
    ce, se = math.cos(pose.psi), math.sin(pose.psi)
    ego_to_world = np.array([[ce, -se, 0, pose.x], [se, ce, 0, pose.y], [0, 0, 1, 0], [0, 0, 0, 1.0]])
    cam = intr.matrix() @ (extr.matrix() @ np.linalg.inv(ego_to_world) @ np.append(p_world, 1.0))[:3]
    return cam[0] / cam[2], cam[1] / cam[2], cam[2]


def random_pose(rng):
    return w.VehiclePose(*rng.uniform(-20, 20, 2), rng.uniform(-math.pi, math.pi))


def empty_world(pose, statics=()):
    base = w.spawn_episode(1, "vertical", pedestrians=0)
    return replace(base, ego=w.EgoState(pose), static_vehicles=tuple(statics))


class TestIntrinsicsExtrinsics:
    def test_rig_rotations_orthonormal(self):
        for cam in RIG:
            r = cam.extr.rotation
            assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-9
            assert abs(np.linalg.det(r) - 1.0) < 1e-9

    def test_random_mounts_orthonormal(self, rng):
        for _ in range(100):
            e = CameraExtrinsics.from_mount(*rng.normal(size=3), rng.uniform(-4, 4), rng.uniform(-1.5, 1.5))
            assert np.max(np.abs(e.rotation.T @ e.rotation - np.eye(3))) < 1e-9

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 1.0, 0, 0, 10, 10)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 11, 0, 10, 10)
        with pytest.raises(ValueError):
            CameraExtrinsics(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rig_layout(self):
        assert [cam.name for cam in RIG] == ["front", "rear", "left", "right"]
        assert all(cam.intr.width == cam.intr.height == 128 for cam in RIG)


class TestProject:
    def test_optical_axis(self):
        cam = RIG[0]
        pose = w.VehiclePose(3.0, -2.0, 0.8)
        fwd = cam.extr.rotation[2]
        p_ego = cam.extr.centre() + 7.5 * fwd
        p_world = np.array([*pose.to_world(p_ego[:2])[0], p_ego[2]])
        u, v, d = project(p_world, cam.intr, cam.extr, pose)
        assert abs(u - cam.intr.cx) < 1e-9 and abs(v - cam.intr.cy) < 1e-9 and abs(d - 7.5) < 1e-9

    def test_matches_homogeneous_oracle(self, rng):
        for _ in range(200):
            cam = RIG[rng.integers(4)]
            pose = random_pose(rng)
            p = np.array([*rng.uniform(-30, 30, 2), rng.uniform(0, 3)])
            got = project(p, cam.intr, cam.extr, pose)
            u, v, z = homogeneous_project(p, cam.intr, cam.extr, pose)
            if z <= 0:
                assert got is None
            else:
                assert np.max(np.abs(np.array(got) - [u, v, z])) < 1e-9 * max(1.0, abs(u), abs(v))

    def test_behind_marker(self):
        cam = RIG[0]
        assert project(cam.extr.centre() - cam.extr.rotation[2], cam.intr, cam.extr) is None
        uv, z = project_points(np.array([[-5.0, 0.0, 0.0]]), cam.intr, cam.extr)
        assert z[0] < 0 and np.all(np.isnan(uv))

    def test_round_trip_in_frustum(self, rng):
        for _ in range(200):
            cam = RIG[rng.integers(4)]
            pose = random_pose(rng)
            u, v = rng.uniform(0, 128, 2)
            d = rng.uniform(0.5, 40.0)
            p = unproject(u, v, d, cam.intr, cam.extr, pose)
            assert np.max(np.abs(unproject(*project(p, cam.intr, cam.extr, pose), cam.intr, cam.extr, pose) - p)) < 1e-9
            assert np.max(np.abs(np.array(project(p, cam.intr, cam.extr, pose)) - [u, v, d])) < 1e-9


class TestUnproject:
    def test_principal_point(self):
        cam = RIG[2]
        p = unproject(cam.intr.cx, cam.intr.cy, 4.0, cam.intr, cam.extr)
        assert np.max(np.abs(p - (cam.extr.centre() + 4.0 * cam.extr.rotation[2]))) < 1e-12

    def test_pixel_grid_identity(self):
        cam = RIG[1]
        j, i = np.meshgrid(np.arange(128) + 0.5, np.arange(128) + 0.5)
        pts = c.unproject_points(j, i, 3.0, cam.intr, cam.extr).reshape(-1, 3)
        uv, z = project_points(pts, cam.intr, cam.extr)
        assert np.max(np.abs(uv - np.stack([j.ravel(), i.ravel()], 1))) < 1e-9
        assert np.max(np.abs(z - 3.0)) < 1e-12

    def test_frustum_aspect_ratio(self):
        intr = CameraIntrinsics(80.0, 50.0, 64.0, 48.0, 128, 96)
        extr = CameraExtrinsics(np.eye(3), np.zeros(3))
        d = 5.0
        corners = np.array([unproject(u, v, d, intr, extr) for u, v in ((0, 0), (128, 0), (128, 96), (0, 96))])
        width = corners[1, 0] - corners[0, 0]
        height = corners[2, 1] - corners[1, 1]
        # similar triangles: width = d * W / fx, height = d * H / fy
        assert abs(width - d * 128 / 80) < 1e-12 and abs(height - d * 96 / 50) < 1e-12
        assert abs(width / height - (128 / 80) / (96 / 50)) < 1e-12

    def test_non_positive_depth(self):
        with pytest.raises(ValueError):
            unproject(10, 10, 0.0, RIG[0].intr, RIG[0].extr)


def _mask(frame, name):
    return np.all(np.abs(frame.image - np.array(c._colour(name))) < 1e-12, axis=-1)


class TestRender:
    def test_empty_scene_ground_only(self):
        pose = w.VehiclePose(300.0, 300.0, 0.3)
        for cam, frame in zip(RIG, c.render(empty_world(pose), RIG)):
            assert _mask(frame, "ground").all()
            rays = c.pixel_rays(cam.intr) @ cam.extr.rotation
            h = cam.extr.centre()[2]
            with np.errstate(divide="ignore"):
                t = np.where(rays[..., 2] < 0, -h / rays[..., 2], 0.0)
            t[t > c.FAR] = 0.0
            assert np.max(np.abs(frame.depth - t)) <= 5e-4 + 1e-12

    @pytest.mark.parametrize("dist", [12.0, 16.0, 20.0])
    def test_vehicle_blob_centroid(self, dist):
        cam, pose = RIG[0], w.VehiclePose(0.0, 0.0, 0.0)
        box = w.OrientedBox(dist, 0.0, math.pi / 2, w.CAR_LENGTH, w.CAR_WIDTH)
        frame = c.render_camera(empty_world(pose, [box]), cam)
        m = _mask(frame, "vehicle")
        assert ndimage.label(m)[1] == 1
        ii, jj = np.nonzero(m)
        u, v, _ = project([dist, 0.0, c.VEHICLE_HEIGHT / 2], cam.intr, cam.extr, pose)
        assert math.hypot(jj.mean() + 0.5 - u, ii.mean() + 0.5 - v) < 1.0

    def test_deterministic(self):
        s = w.spawn_episode(8, "parallel", pedestrians=3)
        a, b = c.render(s, RIG), c.render(s, RIG)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.image, fb.image) and np.array_equal(fa.depth, fb.depth)

    def test_nearer_box_wins(self):
        cam, pose = RIG[0], w.VehiclePose(0.0, 0.0, 0.0)
        near = w.OrientedBox(8.0, 0.0, math.pi / 2, w.CAR_LENGTH, w.CAR_WIDTH)
        far = w.OrientedBox(14.0, 0.0, math.pi / 2, 8.0, 6.0)
        for statics in ((near, far), (far, near)):
            frame = c.render_camera(empty_world(pose, statics), cam)
            u, v, _ = project([8.0 - w.CAR_WIDTH / 2, 0.0, 0.75], cam.intr, cam.extr, pose)
            i, j = int(v), int(u)
            # ray through the pixel centre meets the near face at camera depth t
            ray = c.pixel_rays(cam.intr)[i, j] @ cam.extr.rotation
            t = (8.0 - w.CAR_WIDTH / 2 - cam.extr.centre()[0]) / ray[0]
            assert _mask(frame, "vehicle")[i, j]
            assert abs(frame.depth[i, j] - t) <= 5e-4 + 1e-12

    def test_reprojection_of_hit_pixels(self):
        s = w.spawn_episode(3, "vertical", pedestrians=4)
        pose = s.ego.pose
        for cam, frame in zip(RIG, c.render(s, RIG)):
            i, j = np.nonzero(frame.depth > 0)
            u, v = j + 0.5, i + 0.5
            pts = c.unproject_points(u, v, frame.depth[i, j], cam.intr, cam.extr, pose)
            uv, _ = project_points(pts, cam.intr, cam.extr, pose)
            assert np.max(np.abs(uv - np.stack([u, v], 1))) < 0.5

    def test_value_ranges(self):
        s = w.spawn_episode(5, "parallel", pedestrians=4)
        for frame in c.render(s, RIG):
            assert frame.image.shape == (128, 128, 3) and frame.depth.shape == (128, 128)
            assert frame.image.min() >= 0 and frame.image.max() <= 1 and frame.depth.min() >= 0

    def test_empty_rig_rejected(self):
        with pytest.raises(ValueError):
            c.render(w.spawn_episode(1, "vertical"), [])


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    c.write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(c.read_ppm(tmp_path / "a.ppm"), img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n5 7\n255\n")
