import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mveq import oracles
from mveq.errors import (
    CameraPlaneError,
    ConfigurationError,
    FormatError,
    InvalidDepthError,
    InvalidRotationError,
)
from mveq.geometry import (
    Box,
    DepthMap,
    Intrinsics,
    OcclusionTolerance,
    Plane,
    RigidPose,
    Sphere,
    SyntheticScene,
    backproject,
    backproject_many,
    gt_correspondences,
    load_depth,
    project,
    raytrace_depth,
    rotation_error_deg,
    sample_depth_bilinear,
    save_depth,
)
from mveq.records import ViewRecord
from mveq.rng import SplitMix64
from mveq.synth import look_at, random_pose, scene_preset

K64 = Intrinsics(fx=80.0, fy=70.0, cx=31.5, cy=31.5, width=64, height=64)


class TestBackproject:
    def test_principal_ray(self):
        p = backproject((K64.cx, K64.cy), 1.0, K64, RigidPose.identity())
        np.testing.assert_allclose(p, [0.0, 0.0, 1.0], atol=1e-15)

    def test_one_focal_length_off_axis(self):
        # x = cx + fx at depth 2 lies one unit of tangent off axis: (2, 0, 2).
        k = Intrinsics(fx=10.0, fy=10.0, cx=5.0, cy=5.0, width=32, height=32)
        p = backproject((k.cx + k.fx, k.cy), 2.0, k, RigidPose.identity())
        np.testing.assert_allclose(p, [2.0, 0.0, 2.0], atol=1e-12)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(InvalidDepthError):
            backproject((1.0, 1.0), 0.0, K64, RigidPose.identity())
        with pytest.raises(InvalidDepthError):
            backproject((1.0, 1.0), -2.0, K64, RigidPose.identity())

    def test_roundtrip_oracle_1000_random(self):
        rng = SplitMix64(42)
        worst = 0.0
        for _ in range(1000):
            pose = random_pose(rng)
            x = (rng.uniform() * (K64.width - 1), rng.uniform() * (K64.height - 1))
            d = 0.05 + 20.0 * rng.uniform()
            (u, v), z = project(backproject(x, d, K64, pose), K64, pose)
            worst = max(worst, abs(u - x[0]), abs(v - x[1]), abs(z - d))
        assert worst < 1e-9

    def test_matches_matrix_oracle(self, rng):
        # Independent formulation: p = R^T (d K^-1 [x;1] - t) with explicit K.
        pose = random_pose(rng)
        kmat = K64.matrix()
        x, d = (11.25, 40.5), 3.7
        ref = pose.rotation.T @ (d * np.linalg.inv(kmat) @ [x[0], x[1], 1.0] - pose.translation)
        np.testing.assert_allclose(backproject(x, d, K64, pose), ref, atol=1e-12)
        np.testing.assert_allclose(
            backproject_many(np.array([x]), np.array([d]), K64, pose)[0], ref, atol=1e-12
        )


class TestProject:
    def test_principal_point(self):
        (u, v), z = project((0.0, 0.0, 1.0), K64, RigidPose.identity())
        assert (u, v, z) == (K64.cx, K64.cy, 1.0)

    def test_behind_camera_flagged_by_sign(self):
        (_, _), z = project((0.0, 0.0, -2.0), K64, RigidPose.identity())
        assert z < 0

    def test_on_camera_plane_raises(self):
        with pytest.raises(CameraPlaneError):
            project((1.0, 1.0, 0.0), K64, RigidPose.identity())

    def test_silhouette_point_matches_raytraced_depth(self):
        # A visible sphere surface point projects to a pixel whose ray-traced
        # depth equals the projection's camera depth.
        scene = SyntheticScene([Sphere((0.0, 0.0, 0.0), 1.0)])
        pose = look_at((0.0, 0.0, 3.0))
        rng = SplitMix64(7)
        for _ in range(50):
            d = rng.normal_array(3)
            p = d / np.linalg.norm(d)
            if (pose.rotation @ p + pose.translation)[2] <= 0:
                continue
            cam_center = pose.camera_center()
            if p @ (cam_center - p) <= 0.05:
                continue  # back-facing or grazing: occluded
            (u, v), z = project(p, K64, pose)
            if not (0 <= u <= 63 and 0 <= v <= 63):
                continue
            t = oracles.ray_depth_point(scene, K64, pose, u, v)
            assert abs(t - z) < 1e-9


class TestRotationError:
    def test_identical(self):
        r = random_pose(SplitMix64(1)).rotation
        assert rotation_error_deg(r, r) == 0.0

    def test_ten_degrees_about_z(self):
        rz = Rotation.from_euler("z", 10, degrees=True).as_matrix()
        assert rotation_error_deg(rz, np.eye(3)) == pytest.approx(10.0, abs=1e-9)

    def test_random_pairs_vs_quaternion_oracle(self):
        rng = SplitMix64(3)
        for _ in range(200):
            ra = random_pose(rng).rotation
            rb = random_pose(rng).rotation
            rel = Rotation.from_matrix(ra.T @ rb)
            expected = np.degrees(rel.magnitude())
            assert rotation_error_deg(ra, rb) == pytest.approx(expected, abs=1e-9)

    def test_non_orthonormal_rejected(self):
        bad = np.eye(3)
        bad[0, 1] = 1e-4
        with pytest.raises(InvalidRotationError):
            rotation_error_deg(bad, np.eye(3))


class TestRigidPose:
    def test_validates_orthonormality(self):
        with pytest.raises(InvalidRotationError):
            RigidPose(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflections(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InvalidRotationError):
            RigidPose(r, np.zeros(3))


class TestRaytrace:
    def test_sphere_center_depth(self):
        scene = SyntheticScene([Sphere((0.0, 0.0, 3.0), 1.0)])
        k = Intrinsics(fx=50.0, fy=50.0, cx=15.0, cy=15.0, width=31, height=31)
        depth = raytrace_depth(scene, k, RigidPose.identity())
        assert depth.values[15, 15] == pytest.approx(2.0, abs=1e-12)

    def test_frontal_plane_constant_depth(self):
        scene = SyntheticScene([Plane((0.0, 0.0, 1.0), 5.0)])
        depth = raytrace_depth(scene, K64, RigidPose.identity())
        np.testing.assert_allclose(depth.values, 5.0, atol=1e-9)

    def test_box_occluding_sphere_is_pixelwise_min(self):
        box = Box((-0.4, -0.4, 0.5), (0.4, 0.4, 1.5))
        sphere = Sphere((0.0, 0.0, 3.0), 1.0)
        k = Intrinsics(fx=60.0, fy=60.0, cx=23.5, cy=23.5, width=48, height=48)
        pose = RigidPose.identity()
        d_box = raytrace_depth(SyntheticScene([box]), k, pose).values
        d_sph = raytrace_depth(SyntheticScene([sphere]), k, pose).values
        both = raytrace_depth(SyntheticScene([box, sphere]), k, pose).values
        stack = np.stack([np.where(d_box > 0, d_box, np.inf), np.where(d_sph > 0, d_sph, np.inf)])
        expected = np.where(np.isfinite(stack.min(0)), stack.min(0), 0.0)
        np.testing.assert_allclose(both, expected, atol=1e-12)

    def test_sphere_matches_closed_form_quadratic(self):
        scene = SyntheticScene([Sphere((0.2, -0.1, 0.3), 0.9)])
        pose = look_at((2.0, 1.0, 2.5))
        depth = raytrace_depth(scene, K64, pose).values
        o = pose.camera_center()
        for v in range(0, 64, 7):
            for u in range(0, 64, 7):
                d_cam = np.array([(u - K64.cx) / K64.fx, (v - K64.cy) / K64.fy, 1.0])
                d = pose.rotation.T @ d_cam
                oc = o - np.array([0.2, -0.1, 0.3])
                a, b, c = d @ d, 2 * d @ oc, oc @ oc - 0.81
                disc = b * b - 4 * a * c
                if disc < 0:
                    assert depth[v, u] == 0.0
                    continue
                t1 = (-b - disc**0.5) / (2 * a)
                expected = t1 if t1 > 0 else 0.0
                assert depth[v, u] == pytest.approx(expected, abs=1e-9)

    def test_camera_inside_box_sees_exit_face(self):
        scene = SyntheticScene([Box((-2.0, -2.0, -2.0), (2.0, 2.0, 2.0))])
        depth = raytrace_depth(scene, K64, RigidPose.identity())
        assert depth.values[31, 31] == pytest.approx(2.0, abs=1e-12)


def _view(k, pose, depth_values, vid="v"):
    return ViewRecord(vid, k, pose, DepthMap(depth_values))


class TestGtCorrespondences:
    def test_identical_views_identity_zero_rejected(self, sphere_views):
        v = sphere_views[0]
        corr = gt_correspondences(v, v, stride=4)
        assert len(corr) > 0
        assert corr.n_rejected == 0
        np.testing.assert_allclose(corr.x1, corr.x2, atol=1e-9)

    def test_antipodal_sphere_views_mostly_rejected(self):
        # Opposite sides of a sphere share at most a silhouette band; every
        # surviving pair must be front-facing for both cameras.
        scene = scene_preset("sphere")
        k = Intrinsics(fx=76.8, fy=76.8, cx=31.5, cy=31.5, width=64, height=64)
        va = ViewRecord("a", k, look_at((0, 0, 3.0)), raytrace_depth(scene, k, look_at((0, 0, 3.0))))
        vb = ViewRecord("b", k, look_at((0, 0, -3.0)), raytrace_depth(scene, k, look_at((0, 0, -3.0))))
        corr = gt_correspondences(va, vb, stride=1)
        n_valid = int(np.sum(va.depth.values[::1, ::1] > 0))
        assert corr.n_rejected > 0.9 * n_valid
        for i in range(len(corr)):
            d = va.depth.values[int(corr.x1[i, 1]), int(corr.x1[i, 0])]
            p = backproject(corr.x1[i], d, va.intrinsics, va.pose)
            assert p @ (va.pose.camera_center() - p) > -1e-6
            assert p @ (vb.pose.camera_center() - p) > -1e-6

    def test_box_pair_fully_verified_by_raytrace(self):
        scene = scene_preset("box")
        k = Intrinsics(fx=57.6, fy=57.6, cx=23.5, cy=23.5, width=48, height=48)
        eyes = (
            3.0 * np.array([0.2, 0.3, 0.93]) / np.linalg.norm([0.2, 0.3, 0.93]),
            3.0 * np.array([0.66, 0.3, 0.69]) / np.linalg.norm([0.66, 0.3, 0.69]),
        )  # ~30 degrees apart
        va, vb = (
            ViewRecord(n, k, look_at(e), raytrace_depth(scene, k, look_at(e)))
            for n, e in zip("ab", eyes)
        )
        occ = OcclusionTolerance()
        corr = gt_correspondences(va, vb, stride=2, occ_tol=occ)
        assert len(corr) > 50
        agree = oracles.verify_correspondence_raytrace(
            scene, va, vb, corr.x1, corr.x2, occ.abs_tol, occ.rel_tol
        )
        assert agree == len(corr)

    def test_geometric_consistency_invariant(self, sphere_views):
        va, vb = sphere_views[0], sphere_views[1]
        occ = OcclusionTolerance()
        corr = gt_correspondences(va, vb, stride=2, occ_tol=occ)
        if len(corr) == 0:
            pytest.skip("no overlap for this pair")
        d1 = va.depth.values[corr.x1[:, 1].astype(int), corr.x1[:, 0].astype(int)]
        p1 = backproject_many(corr.x1, d1, va.intrinsics, va.pose)
        d2, valid = sample_depth_bilinear(vb.depth, corr.x2)
        assert valid.all()
        p2 = backproject_many(corr.x2, d2, vb.intrinsics, vb.pose)
        # ||p1 - p2|| = |z - depth_b| * ||dir||; dir norm <= 1.1 for this fov.
        gaps = np.linalg.norm(p1 - p2, axis=1)
        z = (vb.pose.rotation @ p1.T + vb.pose.translation[:, None])[2]
        assert np.all(gaps <= np.maximum(occ.abs_tol, occ.rel_tol * z) * 1.1)

    def test_mismatched_dims_rejected(self):
        k = Intrinsics(fx=10.0, fy=10.0, cx=3.5, cy=3.5, width=8, height=8)
        va = _view(k, RigidPose.identity(), np.ones((8, 8)))
        vb = _view(k, RigidPose.identity(), np.ones((9, 8)))
        with pytest.raises(ConfigurationError):
            gt_correspondences(va, vb)

    def test_missing_depth_rejected(self, sphere_views):
        va = sphere_views[0]
        vb = ViewRecord("nodepth", va.intrinsics, va.pose, None)
        with pytest.raises(ConfigurationError):
            gt_correspondences(va, vb)

    def test_rejects_near_invalid_bilinear_stencil(self):
        # Target lands between a valid and an invalid (0) depth pixel: reject.
        k = Intrinsics(fx=16.0, fy=16.0, cx=3.5, cy=3.5, width=8, height=8)
        da = np.full((8, 8), 2.0)
        db = np.full((8, 8), 2.0)
        db[:, 4:] = 0.0  # right half invalid
        va = _view(k, RigidPose.identity(), da, "a")
        # Shift B slightly so A's pixels project between B's pixel centers.
        pose_b = RigidPose(np.eye(3), np.array([0.05, 0.0, 0.0]))
        vb = _view(k, pose_b, db, "b")
        corr = gt_correspondences(va, vb, stride=1)
        # Columns projecting into the invalid half (or its bilinear border) die.
        assert corr.n_rejected > 0
        assert np.all(corr.x2[:, 0] <= 3.0)


class TestDepthIO:
    def test_roundtrip(self, tmp_path):
        rng = SplitMix64(5)
        d = DepthMap(np.abs(rng.normal_array(12 * 7)).reshape(7, 12))
        path = tmp_path / "d.dpt"
        save_depth(path, d)
        loaded = load_depth(path)
        np.testing.assert_array_equal(
            loaded.values.astype(np.float32), d.values.astype(np.float32)
        )

    def test_bad_magic_offset_zero(self, tmp_path):
        path = tmp_path / "bad.dpt"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError) as exc:
            load_depth(path)
        assert exc.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.dpt"
        import struct

        path.write_bytes(b"DPT1" + struct.pack("<II", 4, 4) + b"\x00" * 10)
        with pytest.raises(FormatError):
            load_depth(path)
