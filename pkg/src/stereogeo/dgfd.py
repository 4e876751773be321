"""LiDAR teacher features, BEV masks and the masked distillation loss.

The teacher's sparse 3D backbone is replaced by a dense stub.  Each occupied
LiDAR voxel carries two features, occupancy (1) and point count.  Scale ``i``
(``i = 1, 2, 3``) average-pools the voxel grid by ``2**(i-1)`` along all
three axes, flattens channel and height into ``F * Y_i`` BEV channels and
average-pools the BEV map down to the stereo grid.  Because the features are
integers and every pooling divisor is a power of two, the pooled values are
exact and independent of summation order.

Distillation loss, with ``M = M_fg * M_sp`` and ``N = max(1, sum(M))``::

    L = sum_i (1 / N) * sum_{c, x, z} M[x, z] * (g_i(F_gf^i) - F_lgf^i)[c, x, z] ** 2
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .egfg import ConfigError, VoxelSpec, fuse_bev, voxel_centers
from .gridcore import ConvKernel, DimensionError, conv2d, seeded_kernel
from .kitti_io import Box3D

__all__ = [
    "LidarVoxelSpec",
    "VoxelGrid",
    "TeacherWeights",
    "DistillResult",
    "voxelize",
    "make_teacher_weights",
    "teacher_bev",
    "teacher_features",
    "build_fg_mask",
    "build_sparse_mask",
    "distill_loss",
]

TEACHER_FEATURES = 2  # occupancy, point count


@dataclass(frozen=True)
class LidarVoxelSpec(VoxelSpec):
    voxel: tuple[float, float, float] = (0.05, 0.1, 0.05)

    @classmethod
    def matching(cls, stereo: VoxelSpec, voxel=(0.05, 0.1, 0.05)) -> "LidarVoxelSpec":
        return cls(stereo.x_range, stereo.y_range, stereo.z_range, voxel)

    def pooling_factors(self, stereo: VoxelSpec) -> tuple[int, int]:
        """Integer (X, Z) reduction from this grid to the stereo BEV grid."""
        if (self.x_range, self.y_range, self.z_range) != (stereo.x_range, stereo.y_range, stereo.z_range):
            raise ConfigError("LiDAR and stereo grids must cover the same region")
        (xl, _, zl), (xs, _, zs) = self.dims, stereo.dims
        if xl % xs or zl % zs:
            raise ConfigError(f"LiDAR grid {self.dims} does not pool evenly onto {stereo.dims}")
        return xl // xs, zl // zs


@dataclass(frozen=True)
class VoxelGrid:
    """Sparse voxelization result: one row per occupied voxel."""

    dims: tuple[int, int, int]
    coords: np.ndarray  # (m, 3) int (xi, yi, zi), sorted by linear index
    counts: np.ndarray  # (m,) int
    means: np.ndarray  # (m, 4) mean x, y, z, reflectance
    dropped: int

    @property
    def total_points(self) -> int:
        return int(self.counts.sum()) + self.dropped


def voxelize(points, spec: VoxelSpec) -> VoxelGrid:
    """Bin camera-frame points ``(n, 3 or 4)`` into ``spec``'s grid.

    Voxel index is ``floor((p - min) / size)``; points outside the half-open
    ranges ``[min, max)`` are dropped.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = np.zeros((0, 4))
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((pts.shape[0], 1))])
    dims = np.array(spec.dims)
    idx = np.floor((pts[:, :3] - spec.mins) / np.array(spec.voxel)).astype(np.int64)
    keep = np.all((pts[:, :3] >= spec.mins) & (pts[:, :3] < spec.maxs), axis=1)
    keep &= np.all((idx >= 0) & (idx < dims), axis=1)
    idx, kept = idx[keep], pts[keep]
    linear = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    uniq, inverse, counts = np.unique(linear, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.size, 4))
    np.add.at(sums, inverse, kept)
    coords = np.stack(np.unravel_index(uniq, tuple(dims)), axis=1)
    means = sums / np.maximum(counts, 1)[:, None]
    return VoxelGrid(tuple(int(d) for d in dims), coords, counts, means, int(pts.shape[0] - kept.shape[0]))


@dataclass(frozen=True)
class TeacherWeights:
    stub: tuple[ConvKernel, ConvKernel, ConvKernel]  # 1x1, per scale, F*Y_i -> C*Y
    fuse: tuple[ConvKernel, ConvKernel, ConvKernel]


def _scale_heights(lidar_y: int) -> list[int]:
    ys = [lidar_y // 2**i for i in range(3)]
    if lidar_y % 4:
        raise ConfigError(f"LiDAR height extent {lidar_y} must be divisible by 4")
    return ys


def make_teacher_weights(lidar: LidarVoxelSpec, stereo: VoxelSpec, channels: int, bev_channels: int, seed: int = 0, kernel_size: int = 3) -> TeacherWeights:
    """Seeds are ``seed + 41..43`` (stub) and ``seed + 51..53`` (fusion)."""
    ys = _scale_heights(lidar.dims[1])
    cy = channels * stereo.dims[1]
    stub = tuple(seeded_kernel(seed + 41 + i, cy, TEACHER_FEATURES * ys[i], 1, 1) for i in range(3))
    k = kernel_size
    fuse = (
        seeded_kernel(seed + 51, bev_channels, cy, k, k),
        seeded_kernel(seed + 52, bev_channels, bev_channels + cy, k, k),
        seeded_kernel(seed + 53, bev_channels, bev_channels + cy, k, k),
    )
    return TeacherWeights(stub, fuse)


def teacher_bev(grid: VoxelGrid, lidar: LidarVoxelSpec, stereo: VoxelSpec) -> list[np.ndarray]:
    """Pooled LiDAR BEV maps ``F_lbev^i``, each ``[F * Y_i, X, Z]`` on the stereo grid."""
    if grid.dims != lidar.dims:
        raise ConfigError(f"voxel grid dims {grid.dims} do not match spec {lidar.dims}")
    fx, fz = lidar.pooling_factors(stereo)
    X, _, Z = stereo.dims
    ys = _scale_heights(lidar.dims[1])
    feats = np.stack([np.ones(len(grid.counts)), grid.counts.astype(np.float64)], axis=0)
    out = []
    for i in range(3):
        p = 2**i
        if fx % p or fz % p:
            raise ConfigError(f"pooling factors {(fx, fz)} not divisible by scale factor {p}")
        yi = grid.coords[:, 1] // p
        xi = grid.coords[:, 0] // fx
        zi = grid.coords[:, 2] // fz
        bev = np.zeros((TEACHER_FEATURES * ys[i], X, Z))
        for f in range(TEACHER_FEATURES):
            np.add.at(bev, (f * ys[i] + yi, xi, zi), feats[f])
        # 3-D pooling by p in every axis, then (fx/p, fz/p) BEV pooling
        out.append(bev / (p**3 * (fx // p) * (fz // p)))
    return out


def teacher_features(grid: VoxelGrid, lidar: LidarVoxelSpec, stereo: VoxelSpec, weights: TeacherWeights) -> list[np.ndarray]:
    """Teacher geometry features ``F_lgf^1..3``, each ``[C', X, Z]``."""
    bevs = teacher_bev(grid, lidar, stereo)
    for b, k in zip(bevs, weights.stub):
        if k.in_channels != b.shape[0]:
            raise ConfigError(f"teacher stub expects {k.in_channels} channels, BEV has {b.shape[0]}")
    stubbed = [conv2d(b, k) for b, k in zip(bevs, weights.stub)]
    return fuse_bev(stubbed, weights.fuse)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def build_fg_mask(boxes, spec: VoxelSpec) -> np.ndarray:
    """``[X, Z]`` mask of BEV cells whose centre lies inside a box footprint.

    Footprint edges count as inside.
    """
    xs, _, zs = voxel_centers(spec)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    mask = np.zeros(gx.shape)
    eps = 1e-9
    for b in boxes:
        if isinstance(b, Box3D) and b.cls == "DontCare":
            continue
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        dx, dz = gx - b.x, gz - b.z
        # box-local coordinates: length along (cos, -sin), width along (sin, cos)
        along = c * dx - s * dz
        across = s * dx + c * dz
        inside = (np.abs(along) <= b.l / 2 + eps) & (np.abs(across) <= b.w / 2 + eps)
        mask[inside] = 1.0
    return mask


def build_sparse_mask(points_cam, spec: VoxelSpec) -> np.ndarray:
    """``[X, Z]`` mask of BEV cells containing at least one in-range point."""
    X, _, Z = spec.dims
    mask = np.zeros((X, Z))
    pts = np.asarray(points_cam, dtype=np.float64)
    if pts.size == 0:
        return mask
    idx = np.floor((pts[:, :3] - spec.mins) / np.array(spec.voxel)).astype(np.int64)
    ok = np.all((pts[:, :3] >= spec.mins) & (pts[:, :3] < spec.maxs), axis=1)
    ok &= (idx[:, 0] >= 0) & (idx[:, 0] < X) & (idx[:, 2] >= 0) & (idx[:, 2] < Z)
    mask[idx[ok, 0], idx[ok, 2]] = 1.0
    return mask


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillResult:
    total: float
    per_scale: tuple[float, ...]
    active_cells: int

    def report(self) -> str:
        lines = [f"scale={i} loss={v:.9g}" for i, v in enumerate(self.per_scale, start=1)]
        lines.append(f"total loss={self.total:.9g}")
        return "\n".join(lines)


def make_adapters(bev_channels: int, seed: int = 0) -> tuple[ConvKernel, ...]:
    """Per-scale 1x1 student adapters, seeds ``seed + 61..63``."""
    return tuple(seeded_kernel(seed + 61 + i, bev_channels, bev_channels, 1, 1) for i in range(3))


def distill_loss(student, teacher, adapters, m_fg, m_sp, per_scale_n: bool = False) -> DistillResult:
    """Masked squared difference between adapted student and teacher features.

    ``N`` counts active cells of the joint mask once and is shared by all
    scales; ``per_scale_n=True`` recomputes it per scale (identical for the
    current masks, kept for masks that vary by scale).
    """
    if not (len(student) == len(teacher) == len(adapters)):
        raise DimensionError("student, teacher and adapters must have one entry per scale")
    mask = np.asarray(m_fg, dtype=np.float64) * np.asarray(m_sp, dtype=np.float64)
    n = max(1, int(mask.sum()))
    terms = []
    for s, t, g in zip(student, teacher, adapters):
        if s.shape[1:] != mask.shape or t.shape[1:] != mask.shape:
            raise DimensionError(f"feature maps {s.shape}/{t.shape} do not match mask {mask.shape}")
        adapted = conv2d(s, g)
        if adapted.shape != t.shape:
            raise DimensionError(f"adapted student {adapted.shape} does not match teacher {t.shape}")
        diff = mask * (adapted - t)
        scale_n = max(1, int(mask.sum())) if per_scale_n else n
        terms.append(float(np.sum(diff * diff)) / scale_n)
    return DistillResult(float(sum(terms)), tuple(terms), int(mask.sum()))
