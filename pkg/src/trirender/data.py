"""Synthetic analytic scenes, scripted pick-place demonstrations, keyframes
and the on-disk dataset layout.

Dataset directory::

    manifest.json                 version, cameras, per-demo task id and frame count
    rig/cam{j}.json               calibration per camera
    demo_{i:03d}/trajectory.json  velocities, gripper, end-effector poses
    demo_{i:03d}/f{k:03d}_c{j}_{rgb,depth,semantic}.trdr
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .container import read_json, read_tensor, write_json, write_tensor
from .errors import CorruptManifest, ValidationError, VersionMismatch
from .geometry import (Bounds, CameraIntrinsics, CameraView, Se3Pose, load_calibration, look_at,
                       pixel_directions, save_calibration)

DATASET_VERSION = 1
SEMANTIC_CHANNELS = 8
GRIPPER_OPEN, GRIPPER_CLOSED = 1, 0

DEFAULT_BOUNDS = Bounds(np.array([-0.4, -0.4, 0.0]), np.array([0.4, 0.4, 0.8]))


@dataclass
class Primitive:
    """Sphere (``size`` = radius) or axis-aligned box (``size`` = full extents)."""

    kind: str
    center: np.ndarray
    size: np.ndarray
    rgb: np.ndarray
    label: int
    movable: bool = False

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValidationError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(3)
        if self.kind == "sphere":
            self.size = self.size.reshape(1)
        else:
            self.size = np.broadcast_to(self.size, (3,)).copy()
        if np.any(self.size <= 0):
            raise ValidationError("primitive size must be positive")
        if not 0 <= int(self.label) < SEMANTIC_CHANNELS:
            raise ValidationError(f"label {self.label} outside [0, {SEMANTIC_CHANNELS})")
        self.label = int(self.label)

    @property
    def half_extent(self) -> np.ndarray:
        return np.repeat(self.size, 3) if self.kind == "sphere" else self.size / 2.0

    def moved_to(self, center) -> "Primitive":
        return Primitive(self.kind, center, self.size.copy(), self.rgb.copy(), self.label, self.movable)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": self.center.tolist(), "size": self.size.tolist(),
                "rgb": self.rgb.tolist(), "label": self.label, "movable": self.movable}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["kind"], d["center"], d["size"], d["rgb"], d["label"], d.get("movable", False))


@dataclass
class SceneSpec:
    bounds: Bounds
    primitives: list[Primitive] = field(default_factory=list)
    target: np.ndarray | None = None  # place location for the movable primitive

    def __post_init__(self):
        for p in self.primitives:
            lo, hi = p.center - p.half_extent, p.center + p.half_extent
            if np.any(hi < self.bounds.lo) or np.any(lo > self.bounds.hi):
                raise ValidationError(f"{p.kind} at {p.center} does not intersect the workspace")
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64).reshape(3)

    def movable_index(self) -> int:
        for i, p in enumerate(self.primitives):
            if p.movable:
                return i
        raise ValidationError("scene has no movable primitive")

    def with_primitive(self, i: int, prim: Primitive) -> "SceneSpec":
        prims = list(self.primitives)
        prims[i] = prim
        return SceneSpec(self.bounds, prims, self.target)

    def to_dict(self) -> dict:
        return {"bounds": self.bounds.to_dict(), "primitives": [p.to_dict() for p in self.primitives],
                "target": None if self.target is None else self.target.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            return cls(Bounds.from_dict(d["bounds"]), [Primitive.from_dict(p) for p in d["primitives"]],
                       d.get("target"))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad scene spec: {exc}") from exc

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(read_json(path))


TABLE_TOP = 0.05


def table(bounds: Bounds = DEFAULT_BOUNDS) -> Primitive:
    size = np.array([bounds.size[0], bounds.size[1], TABLE_TOP - bounds.lo[2]])
    center = np.array([bounds.center[0], bounds.center[1], bounds.lo[2] + size[2] / 2.0])
    return Primitive("box", center, size, (0.55, 0.45, 0.35), 1)


def random_scene(rng: np.random.Generator, bounds: Bounds = DEFAULT_BOUNDS) -> SceneSpec:
    """Table, a movable cube, a flat target pad and a distractor sphere at
    random well-separated positions."""
    spots = []
    while len(spots) < 3:
        p = rng.uniform(-0.25, 0.25, size=2)
        if all(np.linalg.norm(p - q) > 0.17 for q in spots):
            spots.append(p)
    cube = 0.1
    prims = [
        table(bounds),
        Primitive("box", [*spots[0], TABLE_TOP + cube / 2], cube, rng.uniform(0.6, 1.0, 3) * [1.0, 0.2, 0.2],
                  2, movable=True),
        Primitive("box", [*spots[1], TABLE_TOP + 0.005], [0.14, 0.14, 0.01], (0.2, 0.8, 0.3), 3),
        Primitive("sphere", [*spots[2], TABLE_TOP + 0.06], 0.06, (0.2, 0.3, 0.9), 4),
    ]
    return SceneSpec(bounds, prims, target=[*spots[1], TABLE_TOP + 0.01 + cube / 2])


def gripper_primitives(position, gripper: int) -> list[Primitive]:
    """End-effector stand-in: a palm resting just above the tool point and two
    fingers around it. Finger spread and color show the gripper state, so the
    state is visible in the point cloud the way a real arm would be."""
    p = np.asarray(position, dtype=np.float64)
    is_open = gripper == GRIPPER_OPEN
    spread = 0.07 if is_open else 0.056
    color = (0.95, 0.9, 0.2) if is_open else (0.95, 0.45, 0.1)
    palm = Primitive("box", p + [0.0, 0.0, 0.065], [0.16, 0.04, 0.03], (0.6, 0.6, 0.65), 5)
    fingers = [Primitive("box", p + [side * spread, 0.0, 0.01], [0.012, 0.03, 0.08], color, 6)
               for side in (-1.0, 1.0)]
    return [palm, *fingers]


def default_rig(bounds: Bounds = DEFAULT_BOUNDS, size: int = 64, fov_deg: float = 50.0,
                distance: float = 1.0, elevation_deg: float = 45.0) -> list[tuple[CameraIntrinsics, Se3Pose]]:
    """Two cameras at +/-45 degrees azimuth around the front of the workspace."""
    target = np.array([bounds.center[0], bounds.center[1], TABLE_TOP + 0.1])
    intr = CameraIntrinsics.from_fov(fov_deg, size, size)
    el = np.deg2rad(elevation_deg)
    rig = []
    for az in (-45.0, 45.0):
        a = np.deg2rad(az - 90.0)
        eye = target + distance * np.array([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)])
        rig.append((intr, look_at(eye, target)))
    return rig


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = d @ oc
    disc = b * b - (oc @ oc - r * r)
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    s = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - s, -b + s
    t = np.where(ok & (t0 > 0), t0, np.where(ok & (t1 > 0), t1, np.inf))
    return t


def _hit_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        a = (lo - o) * inv
        b = (hi - o) * inv
    tmin = np.where(np.isnan(a), -np.inf, np.minimum(a, b)).max(axis=1)
    tmax = np.where(np.isnan(b), np.inf, np.maximum(a, b)).min(axis=1)
    hit = tmax >= np.maximum(tmin, 0.0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit & (t > 0), t, np.inf)


def raytrace_views(scene: SceneSpec, cameras, dtype=np.float32) -> list[CameraView]:
    """Exact ray/primitive intersection per pixel center. Misses are black
    with depth 0 (invalid) and zero semantics."""
    views = []
    for intr, pose in cameras:
        v, u = np.mgrid[0:intr.height, 0:intr.width]
        d, cos = pixel_directions(intr, pose, u.reshape(-1), v.reshape(-1))
        o = pose.translation
        best = np.full(len(d), np.inf)
        owner = np.full(len(d), -1)
        for i, p in enumerate(scene.primitives):
            if p.kind == "sphere":
                t = _hit_sphere(o, d, p.center, p.size[0])
            else:
                t = _hit_box(o, d, p.center - p.half_extent, p.center + p.half_extent)
            closer = t < best
            best[closer] = t[closer]
            owner[closer] = i
        hit = owner >= 0
        n = len(d)
        rgb = np.zeros((n, 3))
        sem = np.zeros((n, SEMANTIC_CHANNELS))
        depth = np.zeros(n)
        if scene.primitives:
            colors = np.stack([p.rgb for p in scene.primitives])
            labels = np.array([p.label for p in scene.primitives])
            rgb[hit] = colors[owner[hit]]
            sem[np.nonzero(hit)[0], labels[owner[hit]]] = 1.0
            depth[hit] = best[hit] * cos.reshape(-1)[hit]
        h, w = intr.height, intr.width
        views.append(CameraView(intr, pose, rgb.reshape(h, w, 3).astype(dtype), depth.reshape(h, w).astype(dtype),
                                sem.reshape(h, w, SEMANTIC_CHANNELS).astype(dtype)))
    return views


@dataclass
class Frame:
    views: list[CameraView]
    joint_velocities: np.ndarray  # (7,) rad/s
    gripper: int
    ee_pose: Se3Pose
    object_position: np.ndarray | None = None  # scripted ground truth, not serialized into views


@dataclass
class Demonstration:
    frames: list[Frame]
    task_id: int = 0
    instruction: str = "put the cube on the pad"
    waypoints: list[int] = field(default_factory=list)  # scripted stop frames, for checks

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValidationError("a demonstration needs at least two frames")
        n = len(self.frames[0].views)
        for f in self.frames:
            if len(f.views) != n:
                raise ValidationError("frames disagree on the camera rig")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class KeyframeSet:
    indices: tuple[int, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValidationError("keyframe indices must be strictly increasing")

    def __iter__(self):
        return iter(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def pairs(self) -> list[tuple[int, int]]:
        """(current, next keyframe) pairs. Frame 0 serves as the first current
        frame; the last keyframe only appears as a future target."""
        anchors = (0,) + self.indices[:-1]
        return [(a, b) for a, b in zip(anchors, self.indices) if a < b]


def discover_keyframes(demo: Demonstration, vel_eps: float = 1e-3,
                       gripper_change_is_keyframe: bool = False) -> KeyframeSet:
    """Frame ``i >= 1`` is a keyframe when every joint speed is below
    ``vel_eps`` and the gripper state equals that of frame ``i - 1``. The last
    frame is always included, and a candidate whose pose equals (within 1e-4)
    that of the frame before it is merged into that frame when the earlier
    one is frame 0, a keyframe or itself merged. A stationary tail therefore
    collapses onto its first frame.

    With ``gripper_change_is_keyframe`` the gripper condition flips into an
    alternative trigger: a frame is also a keyframe when the gripper toggles.
    """
    frames = demo.frames
    last = len(frames) - 1
    anchors = {0}  # frames that start or continue a run of equal poses
    out = []
    for i in range(1, len(frames)):
        still = np.max(np.abs(frames[i].joint_velocities)) < vel_eps
        same = frames[i].gripper == frames[i - 1].gripper
        hit = (still or not same) if gripper_change_is_keyframe else (still and same)
        if not (hit or i == last):
            continue
        if i - 1 in anchors and _same_pose(frames[i - 1].ee_pose, frames[i].ee_pose):
            anchors.add(i)
            continue
        out.append(i)
        anchors.add(i)
    return KeyframeSet(tuple(out) if out else (last,))


def _same_pose(a: Se3Pose, b: Se3Pose, tol: float = 1e-4) -> bool:
    return bool(np.max(np.abs(a.matrix - b.matrix)) < tol)


# Maps end-effector twist (v, w) to the seven joint speeds; full column rank,
# so the joints are still exactly when the end effector is.
_JOINT_MAP = np.array([
    [1.0, 0.0, 0.0, 0.0, 0.0, 0.3],
    [0.0, 1.0, 0.0, 0.0, 0.2, 0.0],
    [0.0, 0.0, 1.0, 0.1, 0.0, 0.0],
    [0.5, 0.5, 0.0, 1.0, 0.0, 0.0],
    [0.0, 0.5, 0.5, 0.0, 1.0, 0.0],
    [0.5, 0.0, 0.5, 0.0, 0.0, 1.0],
    [0.2, 0.2, 0.2, 0.3, 0.3, 0.3],
])


def make_pick_place_demo(scene: SceneSpec, rng: np.random.Generator, cameras=None, task_id: int = 0,
                         segment_frames: int = 4, hover: float = 0.2, dt: float = 0.1,
                         show_gripper: bool = True, yaw_jitter: float = 0.0) -> Demonstration:
    """Scripted expert: pre-grasp, grasp, lift, pre-place, place, retreat.

    The gripper yaw at the object and at the target points along the
    horizontal bearing from the home position, folded into [-90, 90) since the
    fingers are symmetric, so rotations follow from the scene layout.
    ``yaw_jitter`` adds uniform noise of that many degrees drawn from ``rng``.

    With ``show_gripper`` every frame also renders :func:`gripper_primitives`
    at the end-effector position.

    Every segment follows a cosine speed profile, so the end effector is at
    rest exactly at each waypoint and moving in between. A waypoint where the
    gripper toggles is followed by one more stationary frame carrying the new
    gripper state. The movable primitive rides rigidly with the end effector
    while grasped.
    """
    if scene.target is None:
        raise ValidationError("scene needs a target location")
    cameras = cameras or default_rig(scene.bounds)
    mi = scene.movable_index()
    obj = scene.primitives[mi]
    up = np.array([0.0, 0.0, hover])
    home = np.array([scene.bounds.center[0], scene.bounds.center[1], obj.center[2] + hover + 0.1])

    def bearing(p):
        d = p - home
        yaw = np.degrees(np.arctan2(d[1], d[0])) + rng.uniform(-yaw_jitter, yaw_jitter)
        return (yaw + 90.0) % 180.0 - 90.0

    yaw_grasp, yaw_place = bearing(obj.center), bearing(scene.target)
    # (position, yaw degrees, gripper toggles after arriving)
    waypoints = [
        (obj.center + up, yaw_grasp, False),
        (obj.center.copy(), yaw_grasp, True),
        (obj.center + up, yaw_grasp, False),
        (scene.target + up, yaw_place, False),
        (scene.target.copy(), yaw_place, True),
        (scene.target + up, yaw_place, False),
    ]

    def pose(pos, yaw):
        R = Rotation.from_euler("xyz", [180.0, 0.0, yaw], degrees=True).as_matrix()
        return Se3Pose(R, pos)

    states = [(home.copy(), 0.0, np.zeros(6), GRIPPER_OPEN)]  # (pos, yaw, twist, gripper)
    stops = []
    pos, yaw, grip = home.copy(), 0.0, GRIPPER_OPEN
    for target_pos, target_yaw, toggle in waypoints:
        p0, y0 = pos, yaw
        for k in range(1, segment_frames + 1):
            tau = k / segment_frames
            s = 0.5 * (1.0 - np.cos(np.pi * tau))
            ds = 0.5 * np.pi * np.sin(np.pi * tau) / (segment_frames * dt)
            if k == segment_frames:
                s, ds = 1.0, 0.0
            twist = np.concatenate([(target_pos - p0) * ds, [0.0, 0.0, np.deg2rad(target_yaw - y0) * ds]])
            states.append((p0 + s * (target_pos - p0), y0 + s * (target_yaw - y0), twist, grip))
        pos, yaw = target_pos.copy(), target_yaw
        stops.append(len(states) - 1)
        if toggle:
            grip = GRIPPER_CLOSED if grip == GRIPPER_OPEN else GRIPPER_OPEN
            states.append((pos.copy(), yaw, np.zeros(6), grip))

    frames = []
    offset = None
    obj_pos = obj.center.copy()
    for pos_i, yaw_i, twist, grip_i in states:
        if grip_i == GRIPPER_CLOSED:
            if offset is None:
                offset = obj_pos - pos_i
            obj_pos = pos_i + offset
        else:
            offset = None
        frame_scene = scene.with_primitive(mi, obj.moved_to(obj_pos))
        if show_gripper:
            frame_scene = SceneSpec(scene.bounds, frame_scene.primitives + gripper_primitives(pos_i, grip_i),
                                    scene.target)
        frames.append(Frame(raytrace_views(frame_scene, cameras), _JOINT_MAP @ twist, grip_i, pose(pos_i, yaw_i),
                            obj_pos.copy()))
    return Demonstration(frames, task_id, waypoints=stops)


def write_dataset(path, demos: list[Demonstration]) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not demos:
        raise ValidationError("no demonstrations to write")
    rig = [(v.intrinsics, v.pose) for v in demos[0].frames[0].views]
    (root / "rig").mkdir(exist_ok=True)
    for j, (intr, pose) in enumerate(rig):
        save_calibration(root / "rig" / f"cam{j}.json", intr, pose)
    entries = []
    for i, demo in enumerate(demos):
        d = root / f"demo_{i:03d}"
        d.mkdir(exist_ok=True)
        for k, frame in enumerate(demo.frames):
            for j, view in enumerate(frame.views):
                stem = d / f"f{k:03d}_c{j}"
                write_tensor(f"{stem}_rgb.trdr", view.rgb)
                write_tensor(f"{stem}_depth.trdr", view.depth)
                write_tensor(f"{stem}_semantic.trdr", view.semantic)
        write_json(d / "trajectory.json", {
            "joint_velocities": [f.joint_velocities.tolist() for f in demo.frames],
            "gripper": [f.gripper for f in demo.frames],
            "ee_pose": [f.ee_pose.matrix.reshape(-1).tolist() for f in demo.frames],
            "object_position": [None if f.object_position is None else f.object_position.tolist()
                                for f in demo.frames],
            "waypoints": list(demo.waypoints),
        })
        entries.append({"dir": d.name, "task_id": demo.task_id, "instruction": demo.instruction,
                        "frames": len(demo.frames)})
    write_json(root / "manifest.json", {"version": DATASET_VERSION, "cameras": len(rig),
                                        "semantic_channels": SEMANTIC_CHANNELS, "demos": entries})


def read_dataset(path) -> list[Demonstration]:
    root = Path(path)
    manifest = read_json(root / "manifest.json")
    if not isinstance(manifest, dict) or "version" not in manifest:
        raise CorruptManifest(f"{root}: manifest lacks a version")
    if manifest["version"] != DATASET_VERSION:
        raise VersionMismatch(f"dataset version {manifest['version']}, expected {DATASET_VERSION}")
    try:
        rig = [load_calibration(root / "rig" / f"cam{j}.json") for j in range(int(manifest["cameras"]))]
        demos = []
        for entry in manifest["demos"]:
            d = root / entry["dir"]
            traj = read_json(d / "trajectory.json")
            n = int(entry["frames"])
            if len(traj["gripper"]) != n:
                raise CorruptManifest(f"{d}: trajectory has {len(traj['gripper'])} frames, manifest says {n}")
            frames = []
            for k in range(n):
                views = []
                for j, (intr, pose) in enumerate(rig):
                    stem = d / f"f{k:03d}_c{j}"
                    views.append(CameraView(
                        intr, pose,
                        read_tensor(f"{stem}_rgb.trdr", (intr.height, intr.width, 3)),
                        read_tensor(f"{stem}_depth.trdr", (intr.height, intr.width)),
                        read_tensor(f"{stem}_semantic.trdr"),
                    ))
                obj = traj["object_position"][k]
                frames.append(Frame(views, np.array(traj["joint_velocities"][k]), int(traj["gripper"][k]),
                                    Se3Pose.from_matrix(np.array(traj["ee_pose"][k]).reshape(4, 4)),
                                    None if obj is None else np.array(obj)))
            demos.append(Demonstration(frames, int(entry["task_id"]), entry["instruction"],
                                       list(traj.get("waypoints", []))))
    except (KeyError, TypeError, IndexError, FileNotFoundError) as exc:
        raise CorruptManifest(f"{root}: {exc!r}") from exc
    return demos
