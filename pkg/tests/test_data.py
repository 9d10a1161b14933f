import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trirender.data import (DEFAULT_BOUNDS, GRIPPER_CLOSED, GRIPPER_OPEN, Demonstration, Frame, KeyframeSet,
                            Primitive, SceneSpec, default_rig, discover_keyframes, make_pick_place_demo,
                            random_scene, raytrace_views, read_dataset, write_dataset)
from trirender.errors import CorruptManifest, ValidationError, VersionMismatch
from trirender.geometry import Bounds, CameraIntrinsics, CameraView, Se3Pose, back_project, look_at, project

BIG = Bounds(np.full(3, -2.0), np.full(3, 2.0))


def on_axis_camera(size, fov=30.0, distance=3.0):
    return CameraIntrinsics.from_fov(fov, size, size), look_at([0.0, -distance, 0.0], [0.0, 0.0, 0.0])


def test_empty_scene_is_black_and_invalid():
    (view,) = raytrace_views(SceneSpec(BIG), [on_axis_camera(16)])
    assert not view.valid.any()
    assert np.all(view.rgb == 0) and np.all(view.semantic == 0)


def test_unit_sphere_center_depth_is_exact():
    scene = SceneSpec(BIG, [Primitive("sphere", [0, 0, 0], 1.0, (1, 0, 0), 2)])
    (view,) = raytrace_views(scene, [on_axis_camera(65)], dtype=np.float64)
    assert view.depth[32, 32] == 2.0
    assert view.semantic[32, 32, 2] == 1.0 and view.semantic[32, 32].sum() == 1.0
    assert np.array_equal(view.rgb[32, 32], [1, 0, 0])


def test_sphere_silhouette_area():
    r, z = 0.25, 3.0
    intr, pose = on_axis_camera(256)
    scene = SceneSpec(BIG, [Primitive("sphere", [0, 0, 0], r, (1, 1, 1), 1)])
    (view,) = raytrace_views(scene, [(intr, pose)])
    count = int(view.valid.sum())
    approx = np.pi * r * r * (intr.fx / z) ** 2
    exact = np.pi * intr.fx ** 2 * r * r / (z * z - r * r)  # tangent cone cross-section
    assert abs(count - approx) / approx < 0.02
    assert abs(count - exact) / exact < 0.01


def test_box_depth_and_occlusion():
    near = Primitive("box", [0, -1.0, 0], 0.2, (0, 1, 0), 3)
    far = Primitive("box", [0, 0, 0], 1.0, (0, 0, 1), 4)
    (view,) = raytrace_views(SceneSpec(BIG, [far, near]), [on_axis_camera(33)], dtype=np.float64)
    assert np.isclose(view.depth[16, 16], 3.0 - 1.1)
    assert view.semantic[16, 16, 3] == 1.0
    assert view.semantic[16, 0, 4] == 1.0 or not view.valid[16, 0]


def test_raytraced_depth_matches_back_projection():
    rng = np.random.default_rng(0)
    scene = random_scene(rng)
    for view in raytrace_views(scene, default_rig(), dtype=np.float64):
        cloud = back_project(view)
        uv = project(cloud.positions, view.intrinsics, view.pose)
        v, u = np.nonzero(view.valid)
        assert np.allclose(uv[:, 0], u, atol=1e-6) and np.allclose(uv[:, 1], v, atol=1e-6)
        # every back-projected point lies on the surface of some primitive
        lo = np.stack([p.center - p.half_extent for p in scene.primitives])
        hi = np.stack([p.center + p.half_extent for p in scene.primitives])
        inside = np.all((cloud.positions[:, None] >= lo - 1e-6) & (cloud.positions[:, None] <= hi + 1e-6), axis=2)
        assert inside.any(axis=1).all()


def test_scene_validation_and_round_trip(tmp_path):
    with pytest.raises(ValidationError):
        SceneSpec(DEFAULT_BOUNDS, [Primitive("box", [5, 5, 5], 0.1, (1, 1, 1), 1)])
    with pytest.raises(ValidationError):
        Primitive("cone", [0, 0, 0], 1.0, (1, 1, 1), 1)
    with pytest.raises(ValidationError):
        Primitive("sphere", [0, 0, 0], 1.0, (1, 1, 1), 8)
    scene = random_scene(np.random.default_rng(1))
    scene.save(tmp_path / "scene.json")
    back = SceneSpec.load(tmp_path / "scene.json")
    assert back.to_dict() == scene.to_dict()


# ---------------------------------------------------------------- keyframes

def dummy_view():
    intr = CameraIntrinsics(1.0, 1.0, 0.5, 0.5, 2, 2)
    return CameraView(intr, Se3Pose(np.eye(3), np.zeros(3)), np.zeros((2, 2, 3)), np.zeros((2, 2)),
                      np.zeros((2, 2, 8)))


def constructed_demo(speeds, grippers, positions=None):
    n = len(speeds)
    if positions is None:
        positions = np.arange(n, dtype=float)
    view = dummy_view()
    frames = [Frame([view], np.full(7, s), g, Se3Pose(np.eye(3), [p, 0.0, 0.0]))
              for s, g, p in zip(speeds, grippers, positions)]
    return Demonstration(frames)


def test_constant_motion_gives_last_frame_only():
    demo = constructed_demo([0.5] * 20, [1] * 20)
    assert discover_keyframes(demo).indices == (19,)


def test_stationary_frames_5_and_12():
    speeds = [0.5] * 20
    speeds[5] = speeds[12] = 0.0
    assert discover_keyframes(constructed_demo(speeds, [1] * 20)).indices == (5, 12, 19)


def test_gripper_toggle_frame_is_excluded():
    speeds = [0.5] * 20
    speeds[8] = 0.0
    grip = [1] * 8 + [0] * 12
    demo = constructed_demo(speeds, grip)
    assert discover_keyframes(demo).indices == (19,)
    assert discover_keyframes(demo, gripper_change_is_keyframe=True).indices == (8, 19)


def test_duplicate_poses_collapse_to_first():
    speeds = [0.5] * 5 + [0.0] * 3 + [0.5] * 4
    positions = [0, 1, 2, 3, 4, 5, 5, 5, 6, 7, 8, 9]
    demo = constructed_demo(speeds, [1] * 12, positions)
    assert discover_keyframes(demo).indices == (5, 11)


def test_stationary_tail_collapses():
    speeds = [0.5] * 6 + [0.0] * 4
    positions = [0, 1, 2, 3, 4, 5, 5, 5, 5, 5]
    assert discover_keyframes(constructed_demo(speeds, [1] * 10, positions)).indices == (6,)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.5]), min_size=3, max_size=25), st.integers(1, 4), st.data())
def test_keyframes_invariant_to_prepended_stationary_frames(speeds, extra, data):
    speeds = [0.0] + speeds  # a demonstration starts at rest
    n = len(speeds)
    grip = data.draw(st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n))
    positions = np.cumsum([0] + [s > 0 for s in speeds[1:]]).astype(float)
    base = discover_keyframes(constructed_demo(speeds, grip, positions))
    pre = constructed_demo([0.0] * extra + speeds, [grip[0]] * extra + grip,
                           np.concatenate([np.full(extra, positions[0]), positions]))
    shifted = discover_keyframes(pre)
    assert shifted.indices == tuple(i + extra for i in base.indices)
    assert discover_keyframes(pre) == shifted
    for i in base.indices:
        assert i == n - 1 or (speeds[i] < 1e-3 and grip[i] == grip[i - 1])


def test_keyframe_set_rejects_unsorted():
    with pytest.raises(ValidationError):
        KeyframeSet((3, 3))
    assert KeyframeSet((2, 5, 9)).pairs() == [(0, 2), (2, 5), (5, 9)]


def test_demonstration_needs_two_frames():
    with pytest.raises(ValidationError):
        constructed_demo([0.0], [1])


# ---------------------------------------------------------------- scripted demos

@pytest.fixture(scope="module")
def demo():
    rng = np.random.default_rng(3)
    return make_pick_place_demo(random_scene(rng), rng, cameras=default_rig(size=16))


def test_generated_demo_recovers_waypoints(demo):
    keys = discover_keyframes(demo).indices
    last = len(demo) - 1
    assert keys == tuple(sorted(set(demo.waypoints) | {last}))
    for i in range(1, len(demo)):
        moving = np.max(np.abs(demo.frames[i].joint_velocities)) > 1e-3
        moved = not np.array_equal(demo.frames[i].ee_pose.matrix, demo.frames[i - 1].ee_pose.matrix)
        assert moving == (moved and i not in demo.waypoints)


def test_gripper_sequence(demo):
    g = [f.gripper for f in demo.frames]
    assert g[0] == GRIPPER_OPEN and g[-1] == GRIPPER_OPEN
    changes = [i for i in range(1, len(g)) if g[i] != g[i - 1]]
    assert len(changes) == 2 and g[changes[0]] == GRIPPER_CLOSED


def test_object_moves_with_gripper(demo):
    keys = discover_keyframes(demo).indices
    pos = [demo.frames[i].object_position for i in keys]
    ee = [demo.frames[i].ee_pose.translation for i in keys]
    for a in range(len(keys) - 1):
        i, j = keys[a], keys[a + 1]
        if all(f.gripper == GRIPPER_CLOSED for f in demo.frames[i + 1: j + 1]):
            assert np.allclose(pos[a + 1] - pos[a], ee[a + 1] - ee[a], atol=1e-6)
            assert np.linalg.norm(pos[a + 1] - pos[a]) > 0.05
    grasp = next(i for i in range(1, len(demo)) if demo.frames[i].gripper == GRIPPER_CLOSED)
    lift = next(k for k in keys if k > grasp)
    a, b = demo.frames[grasp].views[0], demo.frames[lift].views[0]
    assert not np.array_equal(a.semantic[..., 2], b.semantic[..., 2])


def test_keyframe_observations_are_distinguishable(demo):
    # the end effector is rendered, so no two anchor frames look the same
    keys = (0,) + discover_keyframes(demo).indices
    for a in keys:
        for b in keys:
            if a < b:
                assert not np.array_equal(demo.frames[a].views[0].rgb, demo.frames[b].views[0].rgb)
    plain = make_pick_place_demo(random_scene(np.random.default_rng(3)), np.random.default_rng(3),
                                 cameras=default_rig(size=16), show_gripper=False)
    assert np.array_equal(plain.frames[0].views[0].rgb, plain.frames[4].views[0].rgb)


def test_gripper_state_changes_finger_color():
    from trirender.data import gripper_primitives
    opened = gripper_primitives([0.0, 0.0, 0.3], GRIPPER_OPEN)
    closed = gripper_primitives([0.0, 0.0, 0.3], GRIPPER_CLOSED)
    assert [p.label for p in opened] == [5, 6, 6]
    assert not np.array_equal(opened[1].rgb, closed[1].rgb)
    assert abs(opened[2].center[0]) > abs(closed[2].center[0])


def test_dataset_round_trip_is_bitwise(tmp_path, demo):
    write_dataset(tmp_path / "ds", [demo])
    (back,) = read_dataset(tmp_path / "ds")
    assert len(back) == len(demo) and back.waypoints == demo.waypoints
    for f, g in zip(demo.frames, back.frames):
        assert f.gripper == g.gripper
        assert np.array_equal(f.joint_velocities, g.joint_velocities)
        assert np.array_equal(f.ee_pose.matrix, g.ee_pose.matrix)
        assert np.array_equal(f.object_position, g.object_position)
        for u, v in zip(f.views, g.views):
            for name in ("rgb", "depth", "semantic"):
                assert getattr(u, name).tobytes() == getattr(v, name).tobytes()
            assert u.intrinsics == v.intrinsics
            assert np.array_equal(u.pose.matrix, v.pose.matrix)


def test_truncated_and_mismatched_datasets(tmp_path, demo):
    root = tmp_path / "ds"
    write_dataset(root, [demo])
    victim = root / "demo_000" / "f003_c1_rgb.trdr"
    victim.write_bytes(victim.read_bytes()[:-7])
    with pytest.raises(CorruptManifest):
        read_dataset(root)
    write_dataset(root, [demo])
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["version"] = 99
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionMismatch):
        read_dataset(root)
    (root / "manifest.json").write_text('{"demos": [')
    with pytest.raises(CorruptManifest):
        read_dataset(root)


def test_ten_demos_read_back_in_order(tmp_path):
    rng = np.random.default_rng(5)
    rig = default_rig(size=4)
    demos = []
    for i in range(10):
        demos.append(make_pick_place_demo(random_scene(rng), rng, rig, task_id=i % 3,
                                          segment_frames=2 + i % 3))
    write_dataset(tmp_path / "ten", demos)
    back = read_dataset(tmp_path / "ten")
    assert [len(d) for d in back] == [len(d) for d in demos]
    assert [d.task_id for d in back] == [d.task_id for d in demos]
    for a, b in zip(demos, back):
        assert np.array_equal(a.frames[-1].views[0].rgb, b.frames[-1].views[0].rgb)
