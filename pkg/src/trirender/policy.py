"""Action value maps: plane heatmaps, 3D argmax, rotation/gripper classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import autograd as ag
from .errors import InvalidBin, OutOfBounds, ValidationError
from .geometry import Bounds, CameraView, PointCloud, Se3Pose, back_project
from .triplane import TriplaneGrid, query


@dataclass
class ActionKeyframe:
    """End-effector target: translation (m), extrinsic XYZ Euler angles (deg), gripper (0/1)."""

    translation: np.ndarray
    rotation: np.ndarray
    gripper: int

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.gripper = int(self.gripper)
        if self.gripper not in (0, 1):
            raise ValidationError("gripper must be 0 or 1")

    @classmethod
    def from_pose(cls, pose: Se3Pose, gripper: int) -> "ActionKeyframe":
        return cls(pose.translation, Rotation.from_matrix(pose.rotation).as_euler("xyz", degrees=True), gripper)

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.rotation, degrees=True).as_matrix()

    def rotation_bins(self, bins: int = 72) -> np.ndarray:
        return euler_to_bins(self.rotation, bins)

    def transformed(self, T: Se3Pose) -> "ActionKeyframe":
        R = T.rotation @ self.rotation_matrix()
        return ActionKeyframe(T.apply(self.translation), Rotation.from_matrix(R).as_euler("xyz", degrees=True),
                              self.gripper)

    def to_dict(self) -> dict:
        return {"translation": self.translation.tolist(), "rotation_deg": self.rotation.tolist(),
                "gripper": self.gripper}


def euler_to_bins(angles_deg, bins: int = 72) -> np.ndarray:
    wrapped = np.mod(np.asarray(angles_deg, dtype=np.float64), 360.0)
    return np.minimum((wrapped / (360.0 / bins)).astype(np.int64), bins - 1)


def bins_to_euler(bins_idx, bins: int = 72) -> np.ndarray:
    """Bin centers, wrapped to [-180, 180)."""
    deg = (np.asarray(bins_idx) + 0.5) * (360.0 / bins)
    return np.mod(deg + 180.0, 360.0) - 180.0


@dataclass
class PlaneHeatmaps:
    xy: ag.Tensor
    xz: ag.Tensor
    yz: ag.Tensor

    def __post_init__(self):
        self.xy, self.xz, self.yz = ag.as_tensor(self.xy), ag.as_tensor(self.xz), ag.as_tensor(self.yz)
        if self.xy.shape[0] != self.xz.shape[0] or self.xy.shape[1] != self.yz.shape[0] \
                or self.xz.shape[1] != self.yz.shape[1]:
            raise ValidationError("heatmap shapes are inconsistent")

    @property
    def shape3d(self) -> tuple[int, int, int]:
        return self.xy.shape[0], self.xy.shape[1], self.xz.shape[1]

    def planes(self) -> dict[str, ag.Tensor]:
        return {"xy": self.xy, "xz": self.xz, "yz": self.yz}


def decode_heatmaps(decoder, grid: TriplaneGrid) -> PlaneHeatmaps:
    return PlaneHeatmaps(decoder.plane(grid.f_xy), decoder.plane(grid.f_xz), decoder.plane(grid.f_yz))


def argmax_3d(h: PlaneHeatmaps, bounds: Bounds):
    """Maximize ``h_xy[x,y] + h_xz[x,z] + h_yz[y,z]`` one x-slice at a time.

    Ties go to the lexicographically smallest (x, y, z). Returns the index
    triple and the world-space center of that cell.
    """
    xy, xz, yz = (np.asarray(ag.as_tensor(p).data) for p in (h.xy, h.xz, h.yz))
    best, best_idx = -np.inf, None
    for x in range(xy.shape[0]):
        s = xy[x][:, None] + xz[x][None, :] + yz
        flat = int(np.argmax(s))
        if s.flat[flat] > best:
            best = s.flat[flat]
            best_idx = (x,) + np.unravel_index(flat, s.shape)
    if best_idx is None:  # all -inf or NaN
        best_idx = (0, 0, 0)
    idx = tuple(int(i) for i in best_idx)
    return idx, cell_center(idx, h.shape3d, bounds)


def cell_center(idx, shape, bounds: Bounds) -> np.ndarray:
    return bounds.lo + (np.asarray(idx, dtype=np.float64) + 0.5) * bounds.size / np.asarray(shape)


def translation_to_cell(translation, shape, bounds: Bounds) -> tuple[int, int, int]:
    t = np.asarray(translation, dtype=np.float64)
    if not bounds.contains(t, eps=1e-9):
        raise OutOfBounds(f"translation {t} outside the workspace")
    idx = np.floor((t - bounds.lo) / (bounds.size / np.asarray(shape))).astype(np.int64)
    return tuple(int(i) for i in np.clip(idx, 0, np.asarray(shape) - 1))


def classify_at(classifier, grid: TriplaneGrid, p):
    """Rotation logits (3, B) and gripper logits (2,) from the triplane feature at ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if not grid.bounds.contains(p, eps=1e-9):
        raise OutOfBounds(f"query point {p} outside the workspace")
    return classifier(query(grid, p.reshape(1, 3)))


def check_bins(bins_idx, bins: int):
    b = np.asarray(bins_idx)
    if np.any(b < 0) or np.any(b >= bins):
        raise InvalidBin(f"rotation bins {b} outside [0, {bins})")
    return b


def observation_cloud(views: list[CameraView]) -> PointCloud:
    return PointCloud.concat([back_project(v) for v in views])


def infer_action(model, views: list[CameraView], task_id: int, bounds: Bounds) -> ActionKeyframe:
    """Deterministic inference: triplane -> both encoders (no mask) -> heatmaps
    -> 3D argmax -> classification at the chosen location."""
    if not views:
        raise ValidationError("need at least one view")
    with ag.no_grad():
        grid = model.triplane(observation_cloud(views), bounds)
        _, future = model.encode(grid, task_id)
        hm = decode_heatmaps(model.heatmaps, future)
        _, translation = argmax_3d(hm, bounds)
        rot_logits, grip_logits = classify_at(model.classifier, future, translation)
    B = model.config.rotation_bins
    rot_bins = np.argmax(rot_logits.data.reshape(3, B), axis=-1)
    return ActionKeyframe(translation, bins_to_euler(rot_bins, B), int(np.argmax(grip_logits.data.reshape(-1))))
