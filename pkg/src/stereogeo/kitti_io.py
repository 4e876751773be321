"""KITTI file formats, camera geometry and synthetic frames.

Box convention follows the KITTI labels: ``(x, y, z)`` is the centre of the
bottom face in the rectified left-camera frame (x right, y down, z forward),
so a box occupies ``y - h <= Y <= y``.  ``yaw`` is the rotation about the
camera y-axis; the box length ``l`` runs along the heading direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .gridcore import FormatError

__all__ = [
    "ParseError",
    "CameraRig",
    "Box3D",
    "Label",
    "Frame",
    "parse_calib",
    "serialize_calib",
    "parse_labels",
    "serialize_labels",
    "read_velodyne",
    "write_velodyne",
    "velo_to_cam",
    "project_to_image",
    "lidar_to_depth",
    "box_corners",
    "read_pgm",
    "write_pgm",
    "read_pfm",
    "write_pfm",
    "make_rig",
    "synthetic_frame",
    "write_frame",
    "load_frame",
    "read_image",
    "find_image",
]


class ParseError(ValueError):
    """Malformed KITTI text input."""


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraRig:
    P_left: np.ndarray
    P_right: np.ndarray
    R0_rect: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tr_velo_to_cam: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))

    def __post_init__(self):
        for name, shape in [("P_left", (3, 4)), ("P_right", (3, 4)), ("R0_rect", (3, 3)), ("Tr_velo_to_cam", (3, 4))]:
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.shape != shape:
                raise ValueError(f"{name} must be {shape}, got {m.shape}")
            object.__setattr__(self, name, m)
        if self.focal <= 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if self.baseline <= 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")
        if not np.allclose(self.R0_rect @ self.R0_rect.T, np.eye(3), atol=1e-4):
            raise ValueError("R0_rect is not orthonormal")

    @property
    def focal(self) -> float:
        return float(self.P_left[0, 0])

    @property
    def baseline(self) -> float:
        return float((self.P_left[0, 3] - self.P_right[0, 3]) / self.P_left[0, 0])


def make_rig(focal: float, cx: float, cy: float, baseline: float) -> CameraRig:
    """Ideal rectified rig with identity extrinsics."""
    P = np.array([[focal, 0.0, cx, 0.0], [0.0, focal, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    P_r = P.copy()
    P_r[0, 3] = -focal * baseline
    return CameraRig(P, P_r)


_CALIB_KEYS = {"P2": 12, "P3": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}


def parse_calib(text: str) -> CameraRig:
    values = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, rest = line.split(":", 1)
        values[key.strip()] = rest.split()
    mats = {}
    for key, n in _CALIB_KEYS.items():
        if key not in values:
            raise ParseError(f"calibration is missing {key}")
        if len(values[key]) != n:
            raise ParseError(f"{key}: expected {n} floats, got {len(values[key])}")
        try:
            mats[key] = np.array([float(v) for v in values[key]])
        except ValueError as exc:
            raise ParseError(f"{key}: {exc}") from None
    return CameraRig(
        P_left=mats["P2"].reshape(3, 4),
        P_right=mats["P3"].reshape(3, 4),
        R0_rect=mats["R0_rect"].reshape(3, 3),
        Tr_velo_to_cam=mats["Tr_velo_to_cam"].reshape(3, 4),
    )


def serialize_calib(rig: CameraRig) -> str:
    def row(m):
        return " ".join(repr(float(v)) for v in np.ravel(m))

    return (
        f"P2: {row(rig.P_left)}\n"
        f"P3: {row(rig.P_right)}\n"
        f"R0_rect: {row(rig.R0_rect)}\n"
        f"Tr_velo_to_cam: {row(rig.Tr_velo_to_cam)}\n"
    )


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    h: float
    w: float
    l: float
    yaw: float
    cls: str = "Car"
    score: float | None = None

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.h, self.w, self.l, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box has non-finite fields: {vals}")
        if self.cls != "DontCare" and min(self.h, self.w, self.l) <= 0:
            raise ValueError(f"box dimensions must be positive, got h={self.h} w={self.w} l={self.l}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.h, self.w, self.l, self.yaw])

    @classmethod
    def from_array(cls, a, label="Car", score=None) -> "Box3D":
        a = [float(v) for v in a]
        return cls(*a, cls=label, score=score)


@dataclass(frozen=True)
class Label:
    """One line of a KITTI label file."""

    box: Box3D
    truncated: float = 0.0
    occluded: int = 0
    alpha: float = -10.0
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    @property
    def cls(self) -> str:
        return self.box.cls

    @property
    def dontcare(self) -> bool:
        return self.box.cls == "DontCare"

    @property
    def score(self) -> float | None:
        return self.box.score

    @property
    def height_px(self) -> float:
        return self.bbox[3] - self.bbox[1]


def parse_labels(text: str) -> list[Label]:
    """Parse KITTI label text; a 16th field, when present, is the score."""
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise ParseError(f"line {lineno}: expected 15 or 16 fields, got {len(fields)}")
        try:
            nums = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        trunc, occ, alpha = nums[0], int(nums[1]), nums[2]
        bbox = tuple(nums[3:7])
        h, w, l, x, y, z, ry = nums[7:14]
        score = nums[14] if len(nums) == 15 else None
        box = Box3D(x, y, z, h, w, l, ry, cls=fields[0], score=score)
        labels.append(Label(box, trunc, occ, alpha, bbox))
    return labels


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def serialize_labels(labels) -> str:
    """Write labels in the KITTI layout with two decimals per field."""
    lines = []
    for lab in labels:
        b = lab.box
        parts = [b.cls, _fmt(lab.truncated), str(int(lab.occluded)), _fmt(lab.alpha)]
        parts += [_fmt(v) for v in lab.bbox]
        parts += [_fmt(v) for v in (b.h, b.w, b.l, b.x, b.y, b.z, b.yaw)]
        if b.score is not None:
            parts.append(f"{b.score:.6f}")
        lines.append(" ".join(parts))
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# velodyne
# ---------------------------------------------------------------------------


def read_velodyne(buf: bytes) -> np.ndarray:
    """Decode a KITTI ``.bin`` buffer into an ``(n, 4)`` float32 array."""
    if len(buf) % 16:
        raise FormatError(f"velodyne buffer length {len(buf)} is not a multiple of 16")
    return np.frombuffer(buf, dtype="<f4").reshape(-1, 4).copy()


def write_velodyne(points) -> bytes:
    pts = np.asarray(points)
    if pts.size == 0:
        return b""
    return np.ascontiguousarray(pts.reshape(-1, 4), dtype="<f4").tobytes()


def velo_to_cam(points, rig: CameraRig) -> np.ndarray:
    """Map velodyne-frame ``(n, >=3)`` points into the rectified camera frame."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3))
    cam = _affine(pts[:, :3], rig.Tr_velo_to_cam[:, :3], rig.Tr_velo_to_cam[:, 3])
    return _affine(cam, rig.R0_rect, np.zeros(3))


def _affine(pts, m, t):
    # explicit sums keep results independent of BLAS threading
    return pts[:, 0:1] * m[:, 0] + pts[:, 1:2] * m[:, 1] + pts[:, 2:3] * m[:, 2] + t


def project_to_image(pts_cam, P) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of camera-frame points; returns ``(uv, depth)``."""
    pts = np.asarray(pts_cam, dtype=np.float64).reshape(-1, 3)
    hom = _affine(pts, P[:, :3], P[:, 3])
    depth = hom[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[:, :2] / depth[:, None]
    return uv, depth


def lidar_to_depth(points, rig: CameraRig, image_h: int, image_w: int) -> np.ndarray:
    """Sparse depth map ``[1, H, W]`` from velodyne points.

    Pixel ``(row, col)`` takes points whose projection rounds to it (pixel
    centres at integer coordinates).  Colliding points keep the nearest depth;
    pixels with no point are 0.
    """
    depth = np.zeros((1, image_h, image_w))
    cam = velo_to_cam(points, rig)
    if cam.shape[0] == 0:
        return depth
    uv, _ = project_to_image(cam, rig.P_left)
    z = cam[:, 2]
    keep = z > 0
    col = np.floor(uv[keep, 0] + 0.5)
    row = np.floor(uv[keep, 1] + 0.5)
    z = z[keep]
    inside = (col >= 0) & (col < image_w) & (row >= 0) & (row < image_h)
    col, row, z = col[inside].astype(np.int64), row[inside].astype(np.int64), z[inside]
    flat = np.full(image_h * image_w, np.inf)
    np.minimum.at(flat, row * image_w + col, z)
    flat[np.isinf(flat)] = 0.0
    depth[0] = flat.reshape(image_h, image_w)
    return depth


def box_corners(box: Box3D) -> np.ndarray:
    """The eight corners ``(8, 3)`` of a box in the camera frame.

    Corners 0-3 are the bottom face, 4-7 the top face, in matching order.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = np.array([1, 1, -1, -1]) * box.l / 2
    lz = np.array([1, -1, -1, 1]) * box.w / 2
    x = box.x + c * lx + s * lz
    z = box.z - s * lx + c * lz
    bottom = np.stack([x, np.full(4, box.y), z], axis=1)
    top = bottom.copy()
    top[:, 1] -= box.h
    return np.vstack([bottom, top])


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def read_pgm(buf: bytes) -> np.ndarray:
    """Binary (P5, maxval 255) PGM to a float array in [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    data = buf[pos : pos + w * h]
    if len(data) != w * h:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def write_pgm(img) -> bytes:
    a = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode() + a.tobytes()


def read_pfm(buf: bytes) -> np.ndarray:
    """Greyscale (``Pf``) little-endian PFM; rows are stored bottom-up."""
    lines = buf.split(b"\n", 3)
    if len(lines) < 4 or lines[0].strip() != b"Pf":
        raise FormatError("only greyscale PFM ('Pf') is supported")
    w, h = (int(v) for v in lines[1].split())
    scale = float(lines[2])
    if scale >= 0:
        raise FormatError("only little-endian PFM (negative scale) is supported")
    data = lines[3]
    if len(data) != 4 * w * h:
        raise FormatError("truncated PFM payload")
    return np.frombuffer(data, dtype="<f4").reshape(h, w)[::-1].astype(np.float64)


def write_pfm(img) -> bytes:
    a = np.asarray(img, dtype="<f4")
    h, w = a.shape
    return f"Pf\n{w} {h}\n-1.0\n".encode() + np.ascontiguousarray(a[::-1]).tobytes()


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    frame_id: str
    rig: CameraRig
    left: np.ndarray  # [H, W] greyscale or [C, H, W] features
    right: np.ndarray
    points: np.ndarray  # (n, 4) velodyne frame
    labels: tuple[Label, ...] = ()

    @property
    def gt_boxes(self) -> list[Box3D]:
        return [lab.box for lab in self.labels if not lab.dontcare]


def _bbox_2d(box: Box3D, rig: CameraRig, image_h: int, image_w: int):
    uv, depth = project_to_image(box_corners(box), rig.P_left)
    if np.any(depth <= 0):
        return None
    x0, y0 = np.clip(uv.min(axis=0), 0, [image_w - 1, image_h - 1])
    x1, y1 = np.clip(uv.max(axis=0), 0, [image_w - 1, image_h - 1])
    return (float(x0), float(y0), float(x1), float(y1))


def synthetic_frame(seed: int, image_h: int = 96, image_w: int = 320, n_cars: int = 3, frame_id: str | None = None) -> Frame:
    """A reproducible toy scene: textured stereo pair, ground plane and cars.

    The right image is the left image shifted by the disparity of a plane at
    ``~20 m``; LiDAR points are sampled from the ground and from car surfaces.
    """
    rng = np.random.default_rng(seed)
    rig = make_rig(721.5377 * image_w / 1242.0, image_w / 2.0, image_h / 2.0, 0.54)

    texture = rng.random((image_h, image_w + 64))
    texture = 0.25 * (texture + np.roll(texture, 1, 1) + np.roll(texture, 1, 0) + np.roll(texture, (1, 1), (0, 1)))
    disp = int(round(rig.focal * rig.baseline / 20.0))
    left = texture[:, :image_w]
    right = texture[:, disp : disp + image_w]

    labels = []
    for _ in range(n_cars):
        box = Box3D(
            x=float(rng.uniform(-8, 8)),
            y=float(rng.uniform(1.5, 1.8)),
            z=float(rng.uniform(8, 45)),
            h=float(rng.uniform(1.4, 1.7)),
            w=float(rng.uniform(1.5, 1.8)),
            l=float(rng.uniform(3.4, 4.4)),
            yaw=float(rng.uniform(-math.pi, math.pi)),
        )
        bbox = _bbox_2d(box, rig, image_h, image_w)
        if bbox is None:
            continue
        labels.append(Label(box, 0.0, int(rng.integers(0, 2)), -10.0, bbox))

    ground = np.stack(
        [rng.uniform(-25, 25, 2000), np.full(2000, 1.7), rng.uniform(3, 55, 2000)], axis=1
    )
    parts = [ground]
    for lab in labels:
        b = lab.box
        local = rng.uniform(-0.5, 0.5, (300, 3)) * [b.l, b.h, b.w]
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        x = b.x + c * local[:, 0] + s * local[:, 2]
        z = b.z - s * local[:, 0] + c * local[:, 2]
        y = b.y - b.h / 2 + local[:, 1]
        parts.append(np.stack([x, y, z], axis=1))
    cam = np.vstack(parts)
    # identity extrinsics: velodyne frame here is (z, -x, -y) of the camera frame
    velo = np.stack([cam[:, 2], -cam[:, 0], -cam[:, 1], rng.random(cam.shape[0])], axis=1)
    tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    rig = replace(rig, Tr_velo_to_cam=tr)
    return Frame(
        frame_id=frame_id if frame_id is not None else f"{seed:06d}",
        rig=rig,
        left=left,
        right=right,
        points=velo.astype(np.float32),
        labels=tuple(labels),
    )


def write_frame(root, frame: Frame) -> None:
    """Write a frame in the KITTI directory layout under ``root``."""
    root = Path(root)
    for sub in ("calib", "label_2", "velodyne", "image_2", "image_3"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    fid = frame.frame_id
    (root / "calib" / f"{fid}.txt").write_text(serialize_calib(frame.rig))
    (root / "label_2" / f"{fid}.txt").write_text(serialize_labels(frame.labels))
    (root / "velodyne" / f"{fid}.bin").write_bytes(write_velodyne(frame.points))
    (root / "image_2" / f"{fid}.pfm").write_bytes(write_pfm(frame.left))
    (root / "image_3" / f"{fid}.pfm").write_bytes(write_pfm(frame.right))


def read_image(path: Path) -> np.ndarray:
    if path.suffix == ".pfm":
        return read_pfm(path.read_bytes())
    return read_pgm(path.read_bytes())


def find_image(folder: Path, fid: str) -> Path:
    for ext in (".pfm", ".pgm"):
        p = folder / f"{fid}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no .pfm or .pgm image for frame {fid} in {folder}")


def load_frame(root, frame_id: str, need_points: bool = True, need_labels: bool = True) -> Frame:
    root = Path(root)
    calib_path = root / "calib" / f"{frame_id}.txt"
    if not calib_path.exists():
        raise FileNotFoundError(f"calibration file not found: {calib_path}")
    rig = parse_calib(calib_path.read_text())
    left = read_image(find_image(root / "image_2", frame_id))
    right = read_image(find_image(root / "image_3", frame_id))
    points = np.zeros((0, 4), dtype=np.float32)
    velo_path = root / "velodyne" / f"{frame_id}.bin"
    if need_points:
        if not velo_path.exists():
            raise FileNotFoundError(f"velodyne file not found: {velo_path}")
        points = read_velodyne(velo_path.read_bytes())
    labels = ()
    label_path = root / "label_2" / f"{frame_id}.txt"
    if need_labels:
        if not label_path.exists():
            raise FileNotFoundError(f"label file not found: {label_path}")
        labels = tuple(parse_labels(label_path.read_text()))
    return Frame(frame_id, rig, left, right, points, labels)
