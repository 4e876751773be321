"""Geometry-aware feature generation from a stereo pair.

Dataflow for one frame::

    backbone_stub          images -> (F_l^i, F_r^i), i = 1..3
    correlate              F_cv^i[d, h, w] = mean_c F_l^i[c, h, w-d] * F_r^i[c, h, w+d]
    build_stereo_volumes   conv / pool / concat cascade, reshaped to [C, D, H_i, W_i]
    frustum_sample         resample each stereo volume onto one metric voxel grid
    flatten_bev            [C, Y, X, Z] -> [C*Y, X, Z]
    fuse_bev               conv cascade across the three scales -> F_gf^i
    map_semantic           left features of the coarsest scale lifted to BEV

The disparity index ``d`` shifts *both* feature maps, so matching columns
differ by ``2d``; a point at depth ``z`` therefore sits at
``d = focal * baseline / (2 * z * stride)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gridcore import (
    ConvKernel,
    DimensionError,
    avg_pool2,
    concat_channels,
    conv2d,
    reshape_to_volume,
    seeded_kernel,
)
from .kitti_io import CameraRig, project_to_image

__all__ = [
    "ConfigError",
    "PyramidConfig",
    "VoxelSpec",
    "EGFGWeights",
    "EGFGOutput",
    "make_weights",
    "backbone_stub",
    "correlate",
    "build_stereo_volumes",
    "voxel_centers",
    "frustum_sample",
    "flatten_bev",
    "unflatten_bev",
    "fuse_bev",
    "map_semantic",
    "run_egfg",
]


class ConfigError(ValueError):
    """Inconsistent configuration."""


@dataclass(frozen=True)
class PyramidConfig:
    strides: tuple[int, int, int] = (4, 8, 16)
    channels: int = 8  # C
    bev_channels: int = 16  # C'
    disparities: int = 24  # D
    max_disparity_px: int = 192
    kernel_size: int = 3

    def __post_init__(self):
        s = tuple(int(v) for v in self.strides)
        object.__setattr__(self, "strides", s)
        if len(s) != 3 or not all(b == 2 * a for a, b in zip(s, s[1:])):
            raise ConfigError(f"strides must double between scales, got {s}")
        if s[0] < 1 or s[0] & (s[0] - 1):
            raise ConfigError(f"finest stride must be a power of two, got {s[0]}")
        if self.channels < 1 or self.bev_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.disparities < 2:
            raise ConfigError("need at least two disparity levels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if 2 * self.disparities * s[0] < self.max_disparity_px:
            raise ConfigError(
                f"{self.disparities} disparity levels at stride {s[0]} cover "
                f"{2 * self.disparities * s[0]} px, less than max_disparity_px={self.max_disparity_px}"
            )


def _extent(lo: float, hi: float, size: float, axis: str) -> int:
    n = (hi - lo) / size
    if size <= 0 or hi <= lo:
        raise ConfigError(f"{axis}: empty range [{lo}, {hi}] or non-positive voxel {size}")
    if abs(n - round(n)) > 1e-9:
        raise ConfigError(f"{axis}: range {hi - lo} is not a multiple of voxel size {size}")
    return int(round(n))


@dataclass(frozen=True)
class VoxelSpec:
    x_range: tuple[float, float] = (-30.0, 30.0)
    y_range: tuple[float, float] = (-1.0, 3.0)
    z_range: tuple[float, float] = (2.0, 59.6)
    voxel: tuple[float, float, float] = (0.4, 0.8, 0.4)

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range", "voxel"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.dims  # validates divisibility

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid extents ``(X, Y, Z)``."""
        return (
            _extent(*self.x_range, self.voxel[0], "x"),
            _extent(*self.y_range, self.voxel[1], "y"),
            _extent(*self.z_range, self.voxel[2], "z"),
        )

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def y_mid(self) -> float:
        return 0.5 * (self.y_range[0] + self.y_range[1])


def voxel_centers(spec: VoxelSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X, Y, Z = spec.dims
    xs = spec.x_range[0] + (np.arange(X) + 0.5) * spec.voxel[0]
    ys = spec.y_range[0] + (np.arange(Y) + 0.5) * spec.voxel[1]
    zs = spec.z_range[0] + (np.arange(Z) + 0.5) * spec.voxel[2]
    return xs, ys, zs


# ---------------------------------------------------------------------------
# fixture weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EGFGWeights:
    backbone: tuple[ConvKernel, ConvKernel, ConvKernel]
    stereo: tuple[ConvKernel, ConvKernel, ConvKernel]
    fuse: tuple[ConvKernel, ConvKernel, ConvKernel]


def make_weights(cfg: PyramidConfig, spec: VoxelSpec, seed: int = 0, image_channels: int = 1) -> EGFGWeights:
    """Seeded kernels for every convolution of the stereo path.

    Kernel seeds are ``seed + offset`` with offsets 1..3 (backbone), 11..13
    (stereo volume cascade) and 21..23 (BEV fusion).
    """
    C, D, Cb, k = cfg.channels, cfg.disparities, cfg.bev_channels, cfg.kernel_size
    Y = spec.dims[1]
    backbone = (
        seeded_kernel(seed + 1, C, image_channels, 3, 3),
        seeded_kernel(seed + 2, C, C, 3, 3),
        seeded_kernel(seed + 3, C, C, 3, 3),
    )
    stereo = (
        seeded_kernel(seed + 11, C * D, D, k, k),
        seeded_kernel(seed + 12, C * D, C * D + D, k, k),
        seeded_kernel(seed + 13, C * D, C * D + D, k, k),
    )
    fuse = (
        seeded_kernel(seed + 21, Cb, C * Y, k, k),
        seeded_kernel(seed + 22, Cb, Cb + C * Y, k, k),
        seeded_kernel(seed + 23, Cb, Cb + C * Y, k, k),
    )
    return EGFGWeights(backbone, stereo, fuse)


# ---------------------------------------------------------------------------
# stereo correlation and reprojection
# ---------------------------------------------------------------------------


def _as_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DimensionError(f"image must be [H, W] or [C, H, W], got {a.shape}")
    return a


def _pyramid(img: np.ndarray, cfg: PyramidConfig, kernels) -> list[np.ndarray]:
    x = img
    for _ in range(int(math.log2(cfg.strides[0]))):
        x = avg_pool2(x)
    feats = [conv2d(x, kernels[0], padding_mode="edge")]
    for kern in kernels[1:]:
        feats.append(conv2d(avg_pool2(feats[-1]), kern, padding_mode="edge"))
    return feats


def backbone_stub(left, right, cfg: PyramidConfig, weights: EGFGWeights):
    """Deterministic stand-in for the image backbone.

    Each scale is average pooling followed by a seeded 3x3 convolution with
    edge padding; left and right share kernels.  Returns ``(feats_l, feats_r)``,
    lists of ``[C, H / stride_i, W / stride_i]`` arrays.
    """
    left, right = _as_image(left), _as_image(right)
    if left.shape != right.shape:
        raise DimensionError(f"stereo pair shapes differ: {left.shape} vs {right.shape}")
    _, h, w = left.shape
    top = cfg.strides[-1]
    if h % top or w % top:
        raise DimensionError(f"image size {h}x{w} is not divisible by {top}")
    return _pyramid(left, cfg, weights.backbone), _pyramid(right, cfg, weights.backbone)


def correlate(f_l, f_r, disparities: int) -> np.ndarray:
    """Cost volume ``[D, H, W]`` by symmetric-shift correlation.

    Entries where ``w - d`` or ``w + d`` leaves the image are 0.
    """
    f_l = np.asarray(f_l, dtype=np.float64)
    f_r = np.asarray(f_r, dtype=np.float64)
    if f_l.shape != f_r.shape or f_l.ndim != 3:
        raise DimensionError(f"feature maps must share a [C, H, W] shape, got {f_l.shape} and {f_r.shape}")
    c, h, w = f_l.shape
    out = np.zeros((disparities, h, w))
    for d in range(disparities):
        if w - 2 * d <= 0:
            break
        out[d, :, d : w - d] = np.sum(f_l[:, :, : w - 2 * d] * f_r[:, :, 2 * d :], axis=0) / c
    return out


def build_stereo_volumes(cost_volumes, channels: int, kernels):
    """Fuse three cost volumes into stereo volumes ``[C, D, H_i, W_i]``.

    Returns ``(raw, volumes)`` where ``raw[i]`` is the ``[C*D, H_i, W_i]``
    map before reshaping.
    """
    if len(cost_volumes) != 3 or len(kernels) != 3:
        raise DimensionError("need three cost volumes and three kernels")
    d = cost_volumes[0].shape[0]
    for k in kernels:
        if k.out_channels != channels * d:
            raise DimensionError(f"stereo kernel outputs {k.out_channels} channels, expected {channels}*{d}")
    raw = [conv2d(cost_volumes[0], kernels[0])]
    for cv, kern in zip(cost_volumes[1:], kernels[1:]):
        raw.append(conv2d(concat_channels(avg_pool2(raw[-1]), cv), kern))
    return raw, [reshape_to_volume(r, channels, d) for r in raw]


# ---------------------------------------------------------------------------
# frustum -> voxel -> BEV
# ---------------------------------------------------------------------------


def _sample_trilinear(vol: np.ndarray, d, v, u) -> np.ndarray:
    """Sample ``vol[C, D, H, W]`` at fractional ``(d, v, u)``; missing corners read 0."""
    _, nd, nh, nw = vol.shape
    out = np.zeros((vol.shape[0], d.size))
    finite = np.isfinite(d) & np.isfinite(v) & np.isfinite(u)
    d = np.where(finite, d, -10.0)
    v = np.where(finite, v, -10.0)
    u = np.where(finite, u, -10.0)
    d0, v0, u0 = np.floor(d), np.floor(v), np.floor(u)
    fd, fv, fu = d - d0, v - v0, u - u0
    for od in (0, 1):
        wd = fd if od else 1.0 - fd
        di = d0 + od
        for ov in (0, 1):
            wv = fv if ov else 1.0 - fv
            vi = v0 + ov
            for ou in (0, 1):
                wu = fu if ou else 1.0 - fu
                ui = u0 + ou
                ok = (di >= 0) & (di < nd) & (vi >= 0) & (vi < nh) & (ui >= 0) & (ui < nw)
                if not ok.any():
                    continue
                wgt = (wd * wv * wu)[ok]
                out[:, ok] += wgt * vol[:, di[ok].astype(int), vi[ok].astype(int), ui[ok].astype(int)]
    return out


def _sample_bilinear(img: np.ndarray, v, u) -> np.ndarray:
    return _sample_trilinear(img[:, None], np.zeros_like(v), v, u)


def frustum_sample(f_sv, rig: CameraRig, spec: VoxelSpec, stride: int) -> np.ndarray:
    """Resample a stereo volume onto the voxel grid, giving ``[C, Y, X, Z]``.

    Every voxel centre is projected with the left camera; the sample position
    in the volume is ``(f*b / (2*z*stride), v / stride, u / stride)``.
    Interpolation is trilinear with zero padding.
    """
    f_sv = np.asarray(f_sv, dtype=np.float64)
    if f_sv.ndim != 4:
        raise DimensionError(f"stereo volume must be [C, D, H, W], got {f_sv.shape}")
    if spec.z_range[0] <= 0:
        raise ConfigError(f"z range must start in front of the camera, got {spec.z_range}")
    xs, ys, zs = voxel_centers(spec)
    Y, X, Z = len(ys), len(xs), len(zs)
    gy, gx, gz = np.meshgrid(ys, xs, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    uv, depth = project_to_image(pts, rig.P_left)
    with np.errstate(divide="ignore"):
        d_c = rig.focal * rig.baseline / (2.0 * pts[:, 2] * stride)
    d_c = np.where(depth > 0, d_c, np.nan)
    out = _sample_trilinear(f_sv, d_c, uv[:, 1] / stride, uv[:, 0] / stride)
    return out.reshape(f_sv.shape[0], Y, X, Z)


def flatten_bev(f_gv) -> np.ndarray:
    """``[C, Y, X, Z] -> [C*Y, X, Z]`` with ``out[c*Y + y] = in[c, y]``."""
    f_gv = np.asarray(f_gv, dtype=np.float64)
    if f_gv.ndim != 4:
        raise DimensionError(f"geometry volume must be [C, Y, X, Z], got {f_gv.shape}")
    c, y, x, z = f_gv.shape
    return f_gv.reshape(c * y, x, z).copy()


def unflatten_bev(f_bev, channels: int) -> np.ndarray:
    f_bev = np.asarray(f_bev, dtype=np.float64)
    cy, x, z = f_bev.shape
    if cy % channels:
        raise DimensionError(f"{cy} BEV channels do not split into {channels} groups")
    return f_bev.reshape(channels, cy // channels, x, z).copy()


def fuse_bev(bevs, kernels) -> list[np.ndarray]:
    """Cascade fusion: each scale is convolved together with the previous output."""
    if len(bevs) != 3 or len(kernels) != 3:
        raise DimensionError("need three BEV maps and three kernels")
    shape = bevs[0].shape
    if any(b.shape != shape for b in bevs):
        raise DimensionError(f"BEV maps must share dims, got {[b.shape for b in bevs]}")
    out = [conv2d(bevs[0], kernels[0])]
    for bev, kern in zip(bevs[1:], kernels[1:]):
        out.append(conv2d(concat_channels(out[-1], bev), kern))
    return out


def map_semantic(f_l, rig: CameraRig, spec: VoxelSpec, stride: int) -> np.ndarray:
    """Lift image features ``[C, H, W]`` onto the BEV grid ``[C, X, Z]``.

    Each BEV cell samples the feature map (bilinear, zero padded) at the
    projection of ``(x, y_mid, z)``.
    """
    f_l = np.asarray(f_l, dtype=np.float64)
    xs, _, zs = voxel_centers(spec)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    pts = np.stack([gx.ravel(), np.full(gx.size, spec.y_mid), gz.ravel()], axis=1)
    uv, depth = project_to_image(pts, rig.P_left)
    v = np.where(depth > 0, uv[:, 1] / stride, np.nan)
    u = np.where(depth > 0, uv[:, 0] / stride, np.nan)
    return _sample_bilinear(f_l, v, u).reshape(f_l.shape[0], len(xs), len(zs))


@dataclass
class EGFGOutput:
    f_l: list[np.ndarray]
    f_r: list[np.ndarray]
    f_cv: list[np.ndarray]
    f_rsv: list[np.ndarray]
    f_sv: list[np.ndarray]
    f_gv: list[np.ndarray]
    f_bev: list[np.ndarray]
    f_gf: list[np.ndarray]
    f_sem: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def head_input(self) -> np.ndarray:
        """Finest fused feature with the lifted semantic features appended."""
        return concat_channels(self.f_gf[2], self.f_sem)

    def tensors(self) -> dict[str, np.ndarray]:
        named = {}
        for key in ("f_l", "f_r", "f_cv", "f_rsv", "f_sv", "f_gv", "f_bev", "f_gf"):
            for i, t in enumerate(getattr(self, key), start=1):
                named[f"{key}{i}"] = t
        named["f_sem"] = self.f_sem
        named["head_input"] = self.head_input
        named.update(self.extras)
        return named


def run_egfg(left, right, rig: CameraRig, cfg: PyramidConfig, spec: VoxelSpec, weights: EGFGWeights) -> EGFGOutput:
    f_l, f_r = backbone_stub(left, right, cfg, weights)
    f_cv = [correlate(a, b, cfg.disparities) for a, b in zip(f_l, f_r)]
    f_rsv, f_sv = build_stereo_volumes(f_cv, cfg.channels, weights.stereo)
    f_gv = [frustum_sample(v, rig, spec, s) for v, s in zip(f_sv, cfg.strides)]
    f_bev = [flatten_bev(g) for g in f_gv]
    f_gf = fuse_bev(f_bev, weights.fuse)
    f_sem = map_semantic(f_l[2], rig, spec, cfg.strides[2])
    return EGFGOutput(f_l, f_r, f_cv, f_rsv, f_sv, f_gv, f_bev, f_gf, f_sem)
