"""Camera models, rigid transforms, RGB-D back-projection and view warping.

Conventions: pinhole cameras in the OpenCV frame (x right, y down, z
forward), poses are camera-to-world, depth is the camera-frame z coordinate
and pixel ``(u, v)`` has its center at integer coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .errors import AllDepthInvalid, RayMissesWorkspace, ValidationError


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned workspace box in world meters."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise ValidationError(f"degenerate bounds lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def contains(self, points: np.ndarray, eps: float = 0.0) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.lo - eps) & (p <= self.hi + eps), axis=-1)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Bounds":
        return cls(np.array(d["lo"]), np.array(d["hi"]))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass(frozen=True)
class Se3Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Se3Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Se3Pose":
        return Se3Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def __matmul__(self, other: "Se3Pose") -> "Se3Pose":
        return Se3Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Se3Pose:
    """Camera-to-world pose at ``eye`` whose +z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Se3Pose(np.stack([right, down, forward], axis=1), eye)


@dataclass
class CameraView:
    intrinsics: CameraIntrinsics
    pose: Se3Pose
    rgb: np.ndarray
    depth: np.ndarray
    semantic: np.ndarray

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (h, w, 3) or self.depth.shape != (h, w) or self.semantic.shape[:2] != (h, w):
            raise ValidationError("image shapes disagree with intrinsics")
        if np.any(self.depth < 0):
            raise ValidationError("negative depth")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth) & (self.depth > 0)


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    semantics: np.ndarray

    def __post_init__(self):
        n = len(self.positions)
        if len(self.colors) != n or len(self.semantics) != n:
            raise ValidationError("point cloud arrays disagree in length")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def concat(cls, clouds: list["PointCloud"]) -> "PointCloud":
        return cls(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.semantics for c in clouds]),
        )

    def transformed(self, pose: Se3Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.positions).astype(self.positions.dtype), self.colors, self.semantics)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def back_project(view: CameraView) -> PointCloud:
    """One world-frame point per valid-depth pixel, carrying its color and semantics."""
    valid = view.valid
    if not valid.any():
        raise AllDepthInvalid("view has no valid depth pixels")
    v, u = np.nonzero(valid)
    z = view.depth[v, u].astype(np.float64)
    k = view.intrinsics
    cam = np.stack([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z], axis=1)
    dtype = view.rgb.dtype
    return PointCloud(view.pose.apply(cam).astype(dtype), view.rgb[v, u], view.semantic[v, u])


def project(points: np.ndarray, intrinsics: CameraIntrinsics, pose: Se3Pose) -> np.ndarray:
    """World points to ``(u, v, depth)`` rows; depth is camera-frame z."""
    cam = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    return np.stack([u, v, z], axis=1)


def pixel_directions(intrinsics: CameraIntrinsics, pose: Se3Pose, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Unit world directions through pixel centers and the z-component of each
    camera-frame direction (to convert z-depth into distance along the ray)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cam = np.stack([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones_like(u)], -1)
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    return cam @ pose.rotation.T, cam[..., 2]


def intersect_aabb(origins, directions, bounds: Bounds, near: float = 0.0, far: float = np.inf):
    """Slab test for many rays. Returns ``(t_near, t_far, hit)``."""
    o = np.atleast_2d(origins)
    d = np.atleast_2d(directions)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bounds.lo - o) * inv
        t1 = (bounds.hi - o) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(lo.max(axis=1), near)
    t_far = np.minimum(hi.min(axis=1), far)
    return t_near, t_far, t_far > t_near


def generate_rays(view_or_cam, u, v, bounds: Bounds, near: float = 0.0, far: float = np.inf):
    """Vectorized ray generation. ``view_or_cam`` is a CameraView or an
    ``(intrinsics, pose)`` pair. Returns origins, directions, t_near, t_far,
    the ray-length per unit z-depth, and a hit mask."""
    intr, pose = _camera_of(view_or_cam)
    dirs, cos = pixel_directions(intr, pose, u, v)
    dirs = dirs.reshape(-1, 3)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    t_near, t_far, hit = intersect_aabb(origins, dirs, bounds, near, far)
    return origins, dirs, t_near, t_far, 1.0 / cos.reshape(-1), hit


def generate_ray(view_or_cam, u: float, v: float, bounds: Bounds, near: float = 0.0, far: float = np.inf) -> Ray:
    intr, _ = _camera_of(view_or_cam)
    if not (0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1):
        raise ValidationError(f"pixel ({u}, {v}) outside the image")
    o, d, tn, tf, _, hit = generate_rays(view_or_cam, [u], [v], bounds, near, far)
    if not hit[0]:
        raise RayMissesWorkspace(f"ray through ({u}, {v}) misses the workspace")
    return Ray(o[0], d[0], float(tn[0]), float(tf[0]))


def _camera_of(view_or_cam):
    if isinstance(view_or_cam, CameraView):
        return view_or_cam.intrinsics, view_or_cam.pose
    return view_or_cam


def z_rotation(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_se3_augmentation(
    cloud: PointCloud,
    poses: list[Se3Pose],
    action,
    rng: np.random.Generator | None = None,
    *,
    max_translation: float = 0.125,
    max_rotation_deg: float = 45.0,
    center=(0.0, 0.0, 0.0),
    translation=None,
    angle_deg: float | None = None,
):
    """Apply one random rigid transform (z-rotation about ``center`` plus a
    translation) to points, camera poses and the action keyframe.

    ``translation``/``angle_deg`` override the random draw.
    """
    if translation is None:
        translation = rng.uniform(-max_translation, max_translation, size=3)
    if angle_deg is None:
        angle_deg = rng.uniform(-max_rotation_deg, max_rotation_deg)
    c = np.asarray(center, dtype=np.float64)
    R = z_rotation(np.deg2rad(angle_deg))
    T = Se3Pose(R, c - R @ c + np.asarray(translation, dtype=np.float64))
    new_cloud = cloud.transformed(T)
    new_poses = [T @ p for p in poses]
    new_action = action.transformed(T) if action is not None else None
    return new_cloud, new_poses, new_action


def _rasterize(cloud: PointCloud, intrinsics: CameraIntrinsics, pose: Se3Pose):
    """1-pixel splats with a z-buffer. Returns winning point index per pixel (-1 if none)."""
    uvz = project(cloud.positions, intrinsics, pose)
    with np.errstate(invalid="ignore"):
        ui = np.rint(uvz[:, 0])
        vi = np.rint(uvz[:, 1])
    ok = (uvz[:, 2] > 0) & (ui >= 0) & (ui < intrinsics.width) & (vi >= 0) & (vi < intrinsics.height)
    idx = np.nonzero(ok)[0]
    pix = vi[idx].astype(np.int64) * intrinsics.width + ui[idx].astype(np.int64)
    # nearest depth first, then lowest point index
    order = np.lexsort((idx, uvz[idx, 2], pix))
    pix, idx = pix[order], idx[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    winner = np.full(intrinsics.width * intrinsics.height, -1, dtype=np.int64)
    winner[pix[first]] = idx[first]
    return winner.reshape(intrinsics.height, intrinsics.width), uvz[:, 2]


def warp_to_view(cloud: PointCloud, intrinsics: CameraIntrinsics, pose: Se3Pose):
    """Z-buffered point rasterization into a target camera.

    Returns ``(rgb, depth, mask)``; pixels with no point are zero and masked out.
    """
    view = warped_view(cloud, intrinsics, pose)
    return view.rgb, view.depth, view.valid


def warped_view(cloud: PointCloud, intrinsics: CameraIntrinsics, pose: Se3Pose) -> CameraView:
    """Like :func:`warp_to_view` but returns a CameraView (semantics included,
    depth 0 where nothing landed)."""
    if len(cloud) == 0:
        raise ValidationError("cannot warp an empty point cloud")
    winner, z = _rasterize(cloud, intrinsics, pose)
    hit = winner >= 0
    h, w = winner.shape
    dtype = cloud.colors.dtype
    rgb = np.zeros((h, w, 3), dtype=dtype)
    depth = np.zeros((h, w), dtype=dtype)
    sem = np.zeros((h, w, cloud.semantics.shape[1]), dtype=cloud.semantics.dtype)
    rgb[hit] = cloud.colors[winner[hit]]
    depth[hit] = z[winner[hit]]
    sem[hit] = cloud.semantics[winner[hit]]
    return CameraView(intrinsics, pose, rgb, depth, sem)


def sample_perturbed_trajectory(
    base: Se3Pose,
    scene_center,
    rng: np.random.Generator | None = None,
    *,
    max_angle_deg: float = 30.0,
    n_frames: int = 25,
    angle_deg: float | None = None,
) -> list[Se3Pose]:
    """Orbit ``base`` about ``scene_center`` by a random angle up to
    ``max_angle_deg`` around a random axis perpendicular to the center-to-camera
    direction, returning ``n_frames`` poses at constant angular velocity.

    The base orientation is carried rigidly, so a base camera that looks at the
    center keeps looking at it along the whole trajectory.
    """
    center = np.asarray(scene_center, dtype=np.float64)
    radial = base.translation - center
    dist = np.linalg.norm(radial)
    if dist < 1e-9:
        raise ValidationError("base camera sits at the scene center")
    if angle_deg is None:
        angle_deg = rng.uniform(0.0, max_angle_deg) if max_angle_deg > 0 else 0.0
        phi = rng.uniform(0.0, 2.0 * np.pi)
    else:
        phi = 0.0 if rng is None else rng.uniform(0.0, 2.0 * np.pi)
    n = radial / dist
    a = np.cross(n, [0.0, 0.0, 1.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(n, [1.0, 0.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    axis = np.cos(phi) * a + np.sin(phi) * b
    key = Rotation.from_rotvec([np.zeros(3), axis * np.deg2rad(angle_deg)])
    fracs = np.linspace(0.0, 1.0, n_frames)
    rots = Slerp([0.0, 1.0], key)(fracs).as_matrix()
    poses = []
    for R in rots:
        if angle_deg == 0.0:
            poses.append(Se3Pose(base.rotation.copy(), base.translation.copy()))
            continue
        R = _orthonormalize(R)
        poses.append(Se3Pose(_orthonormalize(R @ base.rotation), center + R @ radial))
    return poses


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def geodesic_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Rotation angle (radians) of ``Ra^T Rb``."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def save_calibration(path, intrinsics: CameraIntrinsics, pose: Se3Pose) -> None:
    from .container import write_json

    write_json(path, {
        "fx": intrinsics.fx, "fy": intrinsics.fy, "cx": intrinsics.cx, "cy": intrinsics.cy,
        "width": intrinsics.width, "height": intrinsics.height,
        "camera_to_world": pose.matrix.reshape(-1).tolist(),
    })


def load_calibration(path) -> tuple[CameraIntrinsics, Se3Pose]:
    from .container import read_json

    d = read_json(path)
    try:
        intr = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                int(d["width"]), int(d["height"]))
        pose = Se3Pose.from_matrix(np.array(d["camera_to_world"], dtype=np.float64).reshape(4, 4))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: bad calibration ({exc})") from exc
    return intr, pose
