import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advirl.scene import (
    Camera,
    CameraRig,
    InconsistentResolutionError,
    MissingFieldError,
    SceneError,
    SingularPoseError,
    camera_rays,
    generate_ray,
    look_at,
    orbit_rig,
    parse_transforms,
    transforms_dict,
    write_transforms,
)

TARGET = np.array([0.5, 0.5, 0.5])


def identity_camera(w=8, h=6, f=4.0):
    return Camera(w, h, f, f, w / 2, h / 2, np.eye(4))


class TestOrbitRig:
    def test_single_view(self):
        rig = orbit_rig(1, 2.0, 0.0)
        assert len(rig) == 1
        np.testing.assert_allclose(rig[0].position, TARGET + [2.0, 0, 0], atol=1e-12)

    def test_four_views_quarter_turns(self):
        rig = orbit_rig(4, 1.5, 0.0)
        expected = [(1.5, 0), (0, 1.5), (-1.5, 0), (0, -1.5)]
        for cam, (dx, dy) in zip(rig, expected):
            np.testing.assert_allclose(cam.position, TARGET + [dx, dy, 0], atol=1e-12)
            assert np.linalg.norm(cam.position - TARGET) == pytest.approx(1.5, abs=1e-12)

    @pytest.mark.parametrize("elev", [-1.0, 0.0, 0.4, 1.2])
    def test_cameras_look_at_target(self, elev):
        for cam in orbit_rig(7, 1.3, elev):
            to_target = TARGET - cam.position
            cosang = cam.forward @ to_target / np.linalg.norm(to_target)
            assert math.acos(min(1.0, cosang)) < 1e-6

    def test_zero_radius_rejected(self):
        with pytest.raises(SceneError):
            orbit_rig(3, 0.0)

    @given(st.integers(1, 12), st.floats(0.5, 3.0), st.floats(-1.4, 1.4))
    @settings(max_examples=30, deadline=None)
    def test_rotation_relabeling(self, n, radius, elev):
        rig = orbit_rig(n, radius, elev)
        step = 2 * math.pi / n
        rot = np.array([[math.cos(step), -math.sin(step), 0],
                        [math.sin(step), math.cos(step), 0], [0, 0, 1]])
        for k in range(n):
            moved = TARGET + rot @ (rig[k].position - TARGET)
            np.testing.assert_allclose(moved, rig[(k + 1) % n].position, atol=1e-9)

    def test_rotation_blocks_orthonormal(self):
        for cam in orbit_rig(5, 1.0, 0.7):
            r = cam.cam_to_world[:3, :3]
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(r) == pytest.approx(1.0)

    def test_overhead_camera(self):
        cam = orbit_rig(1, 1.0, math.pi / 2)[0]
        np.testing.assert_allclose(cam.forward, (0, 0, -1), atol=1e-12)


class TestGenerateRay:
    def test_principal_point(self):
        cam = Camera(8, 6, 4.0, 4.0, 3.5, 2.5, np.eye(4))
        ray = generate_ray(cam, 3, 2)
        np.testing.assert_allclose(ray.direction, (0, 0, 1), atol=1e-15)

    def test_forty_five_degrees(self):
        cam = Camera(16, 8, 4.0, 4.0, 3.5, 2.5, np.eye(4))
        ray = generate_ray(cam, 7, 2)  # px + 0.5 - cx == fx
        np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-15)

    def test_out_of_bounds(self):
        cam = identity_camera()
        with pytest.raises(SceneError):
            generate_ray(cam, 8, 0)
        with pytest.raises(SceneError):
            generate_ray(cam, 0, -1)

    def test_origin_is_camera_position(self):
        cam = orbit_rig(3, 2.0, 0.2)[1]
        np.testing.assert_allclose(generate_ray(cam, 0, 0).origin, cam.position)

    def test_bundle_matches_single_rays_and_frustum(self):
        cam = orbit_rig(3, 1.7, 0.3, resolution=(9, 7), focal=5.0)[2]
        origins, dirs = camera_rays(cam)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        assert np.all(dirs @ cam.forward > 0)
        for py in range(7):
            for px in range(9):
                r = generate_ray(cam, px, py)
                np.testing.assert_allclose(dirs[py * 9 + px], r.direction, atol=1e-12)
                np.testing.assert_allclose(origins[py * 9 + px], r.origin)


class TestCamera:
    def test_rejects_non_orthonormal(self):
        m = np.eye(4)
        m[0, 0] = 2.0
        with pytest.raises(SceneError):
            Camera(4, 4, 1, 1, 2, 2, m)

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(SceneError):
            Camera(4, 4, 0.0, 1, 2, 2, np.eye(4))
        with pytest.raises(SceneError):
            Camera(4, 4, 1, 1, 4.0, 2, np.eye(4))

    def test_rig_requires_shared_resolution(self):
        with pytest.raises(SceneError):
            CameraRig((identity_camera(8, 6), identity_camera(6, 6)))
        with pytest.raises(SceneError):
            CameraRig(())


class TestTransforms:
    def test_round_trip(self, tmp_path):
        rig = orbit_rig(6, 1.4, 0.5, resolution=(32, 24), focal=30.0)
        p = tmp_path / "transforms.json"
        write_transforms(rig, p)
        back = parse_transforms(p)
        assert len(back) == len(rig)
        for a, b in zip(rig, back):
            np.testing.assert_allclose(a.cam_to_world, b.cam_to_world, atol=1e-9, rtol=0)
            assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy,
                                                                  b.width, b.height)

    def test_opengl_convention(self, tmp_path):
        # an identity OpenGL pose looks down -z with +y up
        doc = {"w": 4, "h": 4, "fl_x": 2.0, "frames": [
            {"file_path": "a.png", "transform_matrix": np.eye(4).tolist()}]}
        p = tmp_path / "t.json"
        p.write_text(json.dumps(doc))
        cam = parse_transforms(p)[0]
        np.testing.assert_allclose(cam.forward, (0, 0, -1))
        np.testing.assert_allclose(cam.cam_to_world[:3, 1], (0, -1, 0))

    def _doc(self, rig):
        return transforms_dict(rig)

    def test_missing_field(self, tmp_path):
        doc = self._doc(orbit_rig(2, 1.0))
        del doc["fl_x"]
        p = tmp_path / "t.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(MissingFieldError):
            parse_transforms(p)
        doc = self._doc(orbit_rig(2, 1.0))
        del doc["frames"][1]["transform_matrix"]
        p.write_text(json.dumps(doc))
        with pytest.raises(MissingFieldError):
            parse_transforms(p)

    def test_singular_matrix(self, tmp_path):
        doc = self._doc(orbit_rig(2, 1.0))
        doc["frames"][0]["transform_matrix"] = np.zeros((4, 4)).tolist()
        p = tmp_path / "t.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(SingularPoseError):
            parse_transforms(p)

    def test_inconsistent_resolution(self, tmp_path):
        doc = self._doc(orbit_rig(2, 1.0, resolution=16))
        doc["frames"][1]["w"] = 32
        p = tmp_path / "t.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(InconsistentResolutionError):
            parse_transforms(p)

    def test_frame_order_preserved(self, tmp_path):
        rig = orbit_rig(5, 1.0)
        p = tmp_path / "t.json"
        write_transforms(rig, p, [f"f{i}" for i in range(5)])
        back = parse_transforms(p)
        for a, b in zip(rig, back):
            np.testing.assert_allclose(a.position, b.position, atol=1e-12)


def test_look_at_right_handed():
    m = look_at((2, 0, 0), (0, 0, 0))
    np.testing.assert_allclose(np.cross(m[:3, 0], m[:3, 1]), m[:3, 2], atol=1e-12)
