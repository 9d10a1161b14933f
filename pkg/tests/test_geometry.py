import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from trirender.container import read_tensor, write_tensor
from trirender.errors import AllDepthInvalid, CorruptManifest, RayMissesWorkspace, ValidationError
from trirender.geometry import (
    Bounds,
    CameraIntrinsics,
    CameraView,
    PointCloud,
    Se3Pose,
    apply_se3_augmentation,
    back_project,
    generate_ray,
    generate_rays,
    geodesic_angle,
    load_calibration,
    look_at,
    sample_perturbed_trajectory,
    save_calibration,
    warp_to_view,
)
from trirender.policy import ActionKeyframe


def make_view(intr, pose, depth, channels=2, seed=0):
    r = np.random.default_rng(seed)
    h, w = intr.height, intr.width
    return CameraView(intr, pose, r.uniform(size=(h, w, 3)), depth, r.uniform(size=(h, w, channels)))


def forward_project_oracle(point, intr, pose):
    """Pinhole projection written out longhand, independent of geometry.project."""
    T_wc = np.linalg.inv(pose.matrix)
    x, y, z, _ = T_wc @ np.append(point, 1.0)
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy, z])


def random_calibration(r):
    w, h = int(r.integers(16, 64)), int(r.integers(16, 64))
    intr = CameraIntrinsics(r.uniform(20, 200), r.uniform(20, 200), r.uniform(0, w - 1), r.uniform(0, h - 1), w, h)
    pose = Se3Pose(Rotation.random(random_state=int(r.integers(1 << 30))).as_matrix(), r.normal(size=3))
    return intr, pose


def test_back_project_pinhole_identity():
    intr = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 5, 5)
    depth = np.zeros((5, 5))
    depth[3, 2] = 4.0
    cloud = back_project(make_view(intr, Se3Pose(), depth))
    np.testing.assert_allclose(cloud.positions, [[8.0, 12.0, 4.0]])


def test_back_project_principal_point_ray():
    intr = CameraIntrinsics(100.0, 100.0, 64.0, 10.0, 128, 20)
    depth = np.zeros((20, 128))
    depth[5, 64] = 3.7
    cloud = back_project(make_view(intr, Se3Pose(), depth))
    assert cloud.positions[0, 0] == 0.0


def test_back_project_carries_attributes_and_rejects_empty():
    intr = CameraIntrinsics(10.0, 10.0, 2.0, 2.0, 4, 4)
    depth = np.zeros((4, 4))
    depth[1, 3] = 2.0
    view = make_view(intr, Se3Pose(), depth)
    cloud = back_project(view)
    np.testing.assert_array_equal(cloud.colors[0], view.rgb[1, 3])
    np.testing.assert_array_equal(cloud.semantics[0], view.semantic[1, 3])
    with pytest.raises(AllDepthInvalid):
        back_project(make_view(intr, Se3Pose(), np.zeros((4, 4))))


def test_round_trip_random_calibrations():
    r = np.random.default_rng(1)
    for _ in range(20):
        intr, pose = random_calibration(r)
        depth = r.uniform(0.3, 5.0, size=(intr.height, intr.width))
        depth[r.uniform(size=depth.shape) < 0.2] = 0.0
        view = make_view(intr, pose, depth)
        cloud = back_project(view)
        v, u = np.nonzero(depth > 0)
        for k in r.choice(len(u), size=25, replace=False):
            got = forward_project_oracle(cloud.positions[k], intr, pose)
            np.testing.assert_allclose(got, [u[k], v[k], depth[v[k], u[k]]], atol=1e-5)


def test_intrinsics_validation():
    with pytest.raises(ValidationError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValidationError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    with pytest.raises(ValidationError):
        Se3Pose(np.diag([1.0, 1.0, -1.0]))


def test_principal_ray_is_forward_axis():
    intr = CameraIntrinsics(50.0, 50.0, 10.0, 8.0, 21, 17)
    bounds = Bounds([-1, -1, 1], [1, 1, 3])
    ray = generate_ray((intr, Se3Pose()), 10, 8, bounds)
    np.testing.assert_allclose(ray.direction, [0, 0, 1], atol=1e-12)
    assert ray.t_near == pytest.approx(1.0) and ray.t_far == pytest.approx(3.0)


def test_workspace_behind_camera_is_missed():
    intr = CameraIntrinsics(50.0, 50.0, 10.0, 8.0, 21, 17)
    with pytest.raises(RayMissesWorkspace):
        generate_ray((intr, Se3Pose()), 10, 8, Bounds([-1, -1, -3], [1, 1, -1]))


def slab_oracle(o, d, lo, hi):
    t0, t1 = -np.inf, np.inf
    for a in range(3):
        if abs(d[a]) < 1e-15:
            if o[a] < lo[a] or o[a] > hi[a]:
                return None
            continue
        ta, tb = sorted(((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]))
        t0, t1 = max(t0, ta), min(t1, tb)
    t0 = max(t0, 0.0)
    return (t0, t1) if t1 > t0 else None


def test_ray_bounds_agree_with_slab_oracle():
    r = np.random.default_rng(2)
    bounds = Bounds([-0.5, -0.4, 0.0], [0.5, 0.6, 0.7])
    intr = CameraIntrinsics.from_fov(70, 48, 40)
    pose = look_at([1.2, -1.0, 1.0], bounds.center)
    us, vs = r.uniform(0, 47, 1000), r.uniform(0, 39, 1000)
    o, d, tn, tf, _, hit = generate_rays((intr, pose), us, vs, bounds)
    for k in range(1000):
        ref = slab_oracle(o[k], d[k], bounds.lo, bounds.hi)
        assert hit[k] == (ref is not None)
        if ref is not None:
            assert abs(tn[k] - ref[0]) < 1e-6 and abs(tf[k] - ref[1]) < 1e-6
            for t in (tn[k], tf[k]):
                assert bounds.contains(o[k] + t * d[k], eps=1e-9)


def _action():
    return ActionKeyframe(np.array([0.1, 0.2, 0.3]), np.array([10.0, -20.0, 30.0]), 1)


def test_zero_augmentation_is_identity():
    r = np.random.default_rng(3)
    cloud = PointCloud(r.normal(size=(10, 3)), r.uniform(size=(10, 3)), r.uniform(size=(10, 2)))
    poses = [look_at([1, 2, 3], [0, 0, 0])]
    c2, p2, a2 = apply_se3_augmentation(cloud, poses, _action(), translation=np.zeros(3), angle_deg=0.0)
    np.testing.assert_allclose(c2.positions, cloud.positions)
    np.testing.assert_allclose(p2[0].matrix, poses[0].matrix)
    np.testing.assert_allclose(a2.translation, _action().translation)
    np.testing.assert_allclose(a2.rotation, _action().rotation, atol=1e-9)


def test_pure_z_rotation():
    cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 3)), np.zeros((1, 1)))
    c2, _, _ = apply_se3_augmentation(cloud, [], None, translation=np.zeros(3), angle_deg=45.0)
    np.testing.assert_allclose(c2.positions[0], [np.sqrt(2) / 2, np.sqrt(2) / 2, 0.0], atol=1e-6)


def test_augmentation_is_rigid_and_bounded():
    r = np.random.default_rng(4)
    cloud = PointCloud(r.normal(size=(30, 3)), r.uniform(size=(30, 3)), r.uniform(size=(30, 2)))
    poses = [look_at(r.normal(size=3) * 3, [0, 0, 0]) for _ in range(3)]
    for _ in range(50):
        c2, p2, a2 = apply_se3_augmentation(cloud, poses, _action(), r, center=[0.1, 0.2, 0.0])
        d0 = np.linalg.norm(cloud.positions[:, None] - cloud.positions[None], axis=-1)
        d1 = np.linalg.norm(c2.positions[:, None] - c2.positions[None], axis=-1)
        np.testing.assert_allclose(d1, d0, atol=1e-6)
        for i in range(3):
            for j in range(3):
                before = np.linalg.inv(poses[i].matrix) @ poses[j].matrix
                after = np.linalg.inv(p2[i].matrix) @ p2[j].matrix
                np.testing.assert_allclose(after, before, atol=1e-6)
        # the rotation is about z only
        assert abs(p2[0].translation[2] - poses[0].translation[2]) <= 0.125 + 1e-12


def test_augmentation_rotates_action_orientation():
    a = ActionKeyframe(np.zeros(3), np.array([0.0, 0.0, 10.0]), 0)
    _, _, a2 = apply_se3_augmentation(PointCloud(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 1))), [], a,
                                      translation=np.zeros(3), angle_deg=30.0)
    np.testing.assert_allclose(a2.rotation, [0.0, 0.0, 40.0], atol=1e-9)


def test_identity_warp_reproduces_source():
    intr = CameraIntrinsics.from_fov(60, 32, 24)
    pose = look_at([0.3, -1.5, 1.0], [0, 0, 0])
    r = np.random.default_rng(5)
    depth = r.uniform(1.0, 2.0, size=(24, 32))
    depth[r.uniform(size=depth.shape) < 0.3] = 0.0
    view = make_view(intr, pose, depth)
    rgb, wd, mask = warp_to_view(back_project(view), intr, pose)
    valid = depth > 0
    assert np.array_equal(mask, valid)
    assert np.array_equal(rgb[valid], view.rgb[valid])
    np.testing.assert_allclose(wd[valid], depth[valid], atol=1e-9)


def test_warp_with_empty_frustum_gives_empty_mask():
    intr = CameraIntrinsics.from_fov(60, 16, 16)
    cloud = PointCloud(np.array([[0.0, 0.0, -5.0]]), np.ones((1, 3)), np.ones((1, 1)))
    _, _, mask = warp_to_view(cloud, intr, Se3Pose())
    assert not mask.any()


def test_warp_disparity_matches_baseline():
    intr = CameraIntrinsics(80.0, 80.0, 31.5, 15.5, 64, 32)
    z, b = 4.0, 0.3
    depth = np.full((32, 64), z)
    cloud = back_project(make_view(intr, Se3Pose(), depth))
    shifted = Se3Pose(np.eye(3), [b, 0.0, 0.0])
    rgb, wd, mask = warp_to_view(cloud, intr, shifted)
    # a source pixel at u lands at u - fx*b/z
    shift = intr.fx * b / z
    src = make_view(intr, Se3Pose(), depth).rgb
    for u in range(10, 50):
        target = int(np.rint(u - shift))
        assert abs((u - target) - shift) <= 0.5
        np.testing.assert_array_equal(rgb[16, target], src[16, u])


def test_z_buffer_keeps_nearest_point():
    intr = CameraIntrinsics(10.0, 10.0, 2.0, 2.0, 5, 5)
    cloud = PointCloud(np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]),
                       np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]), np.zeros((3, 1)))
    rgb, depth, mask = warp_to_view(cloud, intr, Se3Pose())
    assert mask.sum() == 1 and depth[2, 2] == 1.0
    np.testing.assert_array_equal(rgb[2, 2], [0, 1.0, 0])


def test_trajectory_zero_offset_copies_base():
    base = look_at([1.0, 1.0, 1.0], [0, 0, 0])
    poses = sample_perturbed_trajectory(base, [0, 0, 0], max_angle_deg=0.0, rng=np.random.default_rng(0))
    assert len(poses) == 25
    for p in poses:
        np.testing.assert_array_equal(p.matrix, base.matrix)


def test_trajectory_stays_on_sphere_and_within_angle():
    r = np.random.default_rng(6)
    center = np.array([0.1, -0.2, 0.3])
    base = look_at([1.5, 0.4, 1.2], center)
    dist = np.linalg.norm(base.translation - center)
    worst = 0.0
    for _ in range(1000):
        poses = sample_perturbed_trajectory(base, center, r)
        for p in (poses[0], poses[12], poses[24]):
            assert abs(np.linalg.norm(p.translation - center) - dist) < 1e-6
        worst = max(worst, geodesic_angle(poses[0].rotation, poses[24].rotation))
        # still looking at the center
        fwd = poses[24].rotation[:, 2]
        to_c = (center - poses[24].translation) / dist
        assert np.dot(fwd, to_c) > 1 - 1e-9
    assert np.rad2deg(worst) <= 30.0 + 1e-6


def test_trajectory_is_constant_angular_velocity():
    base = look_at([1.0, 0.0, 0.5], [0, 0, 0])
    poses = sample_perturbed_trajectory(base, [0, 0, 0], angle_deg=24.0, rng=np.random.default_rng(1))
    steps = [geodesic_angle(a.rotation, b.rotation) for a, b in zip(poses, poses[1:])]
    np.testing.assert_allclose(np.rad2deg(steps), 1.0, atol=1e-9)


def test_calibration_file_round_trip(tmp_path):
    intr = CameraIntrinsics(100.0, 90.0, 31.5, 20.0, 64, 48)
    pose = look_at([1, 2, 3], [0, 0, 0])
    save_calibration(tmp_path / "cam.json", intr, pose)
    i2, p2 = load_calibration(tmp_path / "cam.json")
    assert i2 == intr
    np.testing.assert_array_equal(p2.matrix, pose.matrix)


def test_container_round_trip_and_corruption(tmp_path):
    r = np.random.default_rng(7)
    img = r.uniform(size=(6, 5, 3)).astype(np.float32)
    depth = r.uniform(size=(6, 5)).astype(np.float32)
    write_tensor(tmp_path / "rgb.trdr", img)
    write_tensor(tmp_path / "d.trdr", depth)
    raw = (tmp_path / "rgb.trdr").read_bytes()
    assert raw[:4] == b"TRDR" and len(raw) == 16 + 4 * img.size
    assert np.array_equal(read_tensor(tmp_path / "rgb.trdr"), img)
    assert np.array_equal(read_tensor(tmp_path / "d.trdr"), depth)
    (tmp_path / "bad.trdr").write_bytes(raw[:-3])
    with pytest.raises(CorruptManifest):
        read_tensor(tmp_path / "bad.trdr")
