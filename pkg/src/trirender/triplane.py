"""Triplane construction, bilinear queries and cell masking.

Plane layout: ``f_xy[x_bin, y_bin]``, ``f_xz[x_bin, z_bin]``, ``f_yz[y_bin, z_bin]``.
A world point maps to continuous plane coordinates
``(p - lo) / cell - 0.5`` so that cell centers sit on integers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Tensor
from .errors import EmptyWorkspace, ShapeMismatch, ValidationError
from .geometry import Bounds, PointCloud

PLANES = ("xy", "xz", "yz")
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


@dataclass
class TriplaneGrid:
    f_xy: Tensor
    f_xz: Tensor
    f_yz: Tensor
    bounds: Bounds

    def __post_init__(self):
        self.f_xy = ag.as_tensor(self.f_xy)
        self.f_xz = ag.as_tensor(self.f_xz)
        self.f_yz = ag.as_tensor(self.f_yz)
        H, W, C = self.f_xy.shape
        if self.f_xz.shape[0] != H or self.f_yz.shape[0] != W or self.f_xz.shape[1] != self.f_yz.shape[1]:
            raise ShapeMismatch("plane shapes are inconsistent")
        if self.f_xz.shape[2] != C or self.f_yz.shape[2] != C:
            raise ShapeMismatch("planes disagree on channel count")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.f_xy.shape[0], self.f_xy.shape[1], self.f_xz.shape[1]

    @property
    def channels(self) -> int:
        return self.f_xy.shape[2]

    @property
    def cell_size(self) -> np.ndarray:
        return self.bounds.size / np.array(self.resolution)

    def planes(self) -> dict[str, Tensor]:
        return {"xy": self.f_xy, "xz": self.f_xz, "yz": self.f_yz}

    def with_planes(self, planes: dict[str, Tensor]) -> "TriplaneGrid":
        return TriplaneGrid(planes["xy"], planes["xz"], planes["yz"], self.bounds)

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.planes().items()}

    @classmethod
    def zeros(cls, bounds: Bounds, resolution=(16, 16, 16), channels: int = 8, dtype=np.float32):
        H, W, D = resolution
        return cls(np.zeros((H, W, channels), dtype), np.zeros((H, D, channels), dtype),
                   np.zeros((W, D, channels), dtype), bounds)


def voxel_indices(points: np.ndarray, bounds: Bounds, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Integer voxel index of each point and a mask of points inside the bounds."""
    res = np.asarray(resolution)
    inside = bounds.contains(points)
    idx = np.floor((np.asarray(points, dtype=np.float64) - bounds.lo) / (bounds.size / res)).astype(np.int64)
    return np.clip(idx, 0, res - 1), inside


def project_points(cloud: PointCloud, point_features, bounds: Bounds, resolution=(16, 16, 16)) -> TriplaneGrid:
    """Max-pool per-point features onto the three axis-aligned planes."""
    feats = ag.as_tensor(point_features)
    if feats.shape[0] != len(cloud):
        raise ShapeMismatch("point_features and cloud differ in length")
    idx, inside = voxel_indices(cloud.positions, bounds, resolution)
    if not inside.any():
        raise EmptyWorkspace("no points inside the workspace")
    keep = np.nonzero(inside)[0]
    if len(keep) < len(cloud):
        feats = feats[keep]
        idx = idx[keep]
    H, W, D = resolution
    C = feats.shape[1]
    planes = {}
    for name, (a, b) in PLANE_AXES.items():
        na, nb = (H, W, D)[a], (H, W, D)[b]
        pooled = ag.scatter_max(feats, idx[:, a] * nb + idx[:, b], na * nb)
        planes[name] = pooled.reshape(na, nb, C)
    return TriplaneGrid(planes["xy"], planes["xz"], planes["yz"], bounds)


def plane_coords(points: np.ndarray, bounds: Bounds, resolution) -> np.ndarray:
    """Continuous voxel coordinates (cell centers at integers), clamped to the grid."""
    res = np.asarray(resolution, dtype=np.float64)
    c = (np.asarray(points, dtype=np.float64) - bounds.lo) / (bounds.size / res) - 0.5
    return np.clip(c, 0.0, res - 1.0)


def bilinear_matrix(coords: np.ndarray, shape: tuple[int, int]) -> sp.csr_matrix:
    """Sparse ``(N, na*nb)`` matrix of bilinear weights for ``coords`` (N, 2)."""
    na, nb = shape
    n = len(coords)
    cols, weights = [], []
    corner = []
    for axis, size in enumerate((na, nb)):
        c = coords[:, axis]
        i0 = np.minimum(np.floor(c).astype(np.int64), max(size - 2, 0))
        frac = c - i0
        i1 = np.minimum(i0 + 1, size - 1)
        corner.append(((i0, 1.0 - frac), (i1, frac)))
    for ia, wa in corner[0]:
        for ib, wb in corner[1]:
            cols.append(ia * nb + ib)
            weights.append(wa * wb)
    rows = np.tile(np.arange(n), 4)
    m = sp.csr_matrix((np.concatenate(weights), (rows, np.concatenate(cols))), shape=(n, na * nb))
    m.sum_duplicates()
    return m


def query(grid: TriplaneGrid, points) -> Tensor:
    """Sum of bilinear lookups on the three planes; ``points`` is (N, 3) or (3,)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    coords = plane_coords(pts, grid.bounds, grid.resolution)
    out = None
    for name, plane in grid.planes().items():
        a, b = PLANE_AXES[name]
        na, nb, C = plane.shape
        m = bilinear_matrix(coords[:, [a, b]], (na, nb)).astype(plane.dtype)
        v = ag.sparse_apply(m, plane.reshape(na * nb, C))
        out = v if out is None else out + v
    return out.reshape(-1) if single else out


@dataclass
class MaskPattern:
    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray
    ratio: float

    def planes(self) -> dict[str, np.ndarray]:
        return {"xy": self.xy, "xz": self.xz, "yz": self.yz}

    @classmethod
    def sample(cls, resolution, ratio: float, rng: np.random.Generator, planes=PLANES) -> "MaskPattern":
        """Mask ``round(ratio * cells)`` cells per plane, without replacement."""
        if not 0.0 <= ratio <= 1.0:
            raise ValidationError(f"mask ratio {ratio} outside [0, 1]")
        res = tuple(resolution)
        masks = {}
        for name in PLANES:
            a, b = PLANE_AXES[name]
            shape = (res[a], res[b])
            m = np.zeros(shape[0] * shape[1], dtype=bool)
            if name in planes:
                k = int(round(ratio * m.size))
                m[rng.choice(m.size, size=k, replace=False)] = True
            masks[name] = m.reshape(shape)
        return cls(masks["xy"], masks["xz"], masks["yz"], ratio)

    @classmethod
    def none(cls, resolution) -> "MaskPattern":
        H, W, D = resolution
        return cls(np.zeros((H, W), bool), np.zeros((H, D), bool), np.zeros((W, D), bool), 0.0)


def apply_mask(grid: TriplaneGrid, pattern: MaskPattern, mask_embedding) -> TriplaneGrid:
    """Replace masked cells with ``mask_embedding``; other cells pass through unchanged."""
    emb = ag.as_tensor(mask_embedding)
    out = {}
    for name, plane in grid.planes().items():
        m = pattern.planes()[name]
        if m.shape != plane.shape[:2]:
            raise ShapeMismatch(f"mask for {name} has shape {m.shape}, plane is {plane.shape[:2]}")
        if emb.shape != (plane.shape[2],):
            raise ShapeMismatch("mask embedding width differs from plane channels")
        out[name] = ag.where(m[:, :, None], emb, plane) if m.any() else plane
    return grid.with_planes(out)
