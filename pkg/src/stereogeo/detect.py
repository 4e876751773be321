"""Anchor-based 3D detection head math.

Boxes are handled as ``(n, 7)`` arrays ``[x, y, z, h, w, l, yaw]`` in the
camera frame (KITTI convention, ``y`` at the bottom face).  Anchors sit on
the BEV cell centres with two yaws each, ``0`` and ``pi/2``; anchor ``a``
belongs to cell ``(a // 2) // Z, (a // 2) % Z`` and yaw slot ``a % 2``.

Residual codec::

    diag = sqrt(w_a**2 + l_a**2)
    dx, dz = (x_g - x_a) / diag, (z_g - z_a) / diag
    dy     = (y_g - y_a) / h_a
    dh, dw, dl = log(h_g / h_a), log(w_g / w_a), log(l_g / l_a)
    dyaw   = yaw_g - yaw_a
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .egfg import VoxelSpec, voxel_centers
from .gridcore import ConvKernel, conv2d, seeded_kernel
from .kitti_io import Box3D

__all__ = [
    "LossConfig",
    "make_anchors",
    "encode",
    "decode",
    "bev_corners",
    "polygon_area",
    "clip_polygon",
    "rotated_iou_bev",
    "iou_3d",
    "iou_matrix",
    "assign_targets",
    "Targets",
    "direction_bins",
    "focal_loss",
    "smooth_l1",
    "losses",
    "HeadOutputs",
    "make_head",
    "head_stub",
    "nms",
    "decode_detections",
]

AREA_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0
    pos_iou: float = 0.6
    neg_iou: float = 0.45


def make_anchors(spec: VoxelSpec, size=(1.56, 1.6, 3.9), y: float = 1.78) -> np.ndarray:
    """``(X * Z * 2, 7)`` anchors, template ``(h, w, l)``, bottom face at ``y``."""
    h, w, l = size
    if min(size) <= 0:
        raise ValueError("anchor template dimensions must be positive")
    xs, _, zs = voxel_centers(spec)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    n = gx.size
    base = np.stack([gx.ravel(), np.full(n, y), gz.ravel(), np.full(n, h), np.full(n, w), np.full(n, l), np.zeros(n)], axis=1)
    anchors = np.repeat(base, 2, axis=0)
    anchors[1::2, 6] = math.pi / 2
    return anchors


# ---------------------------------------------------------------------------
# residual codec
# ---------------------------------------------------------------------------


def encode(gt, anchors) -> np.ndarray:
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    an = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if np.any(gt[:, 3:6] <= 0):
        raise ValueError("ground-truth boxes must have positive dimensions")
    if np.any(an[:, 3:6] <= 0):
        raise ValueError("anchors must have positive dimensions")
    diag = np.sqrt(an[:, 4] ** 2 + an[:, 5] ** 2)
    return np.stack(
        [
            (gt[:, 0] - an[:, 0]) / diag,
            (gt[:, 1] - an[:, 1]) / an[:, 3],
            (gt[:, 2] - an[:, 2]) / diag,
            np.log(gt[:, 3] / an[:, 3]),
            np.log(gt[:, 4] / an[:, 4]),
            np.log(gt[:, 5] / an[:, 5]),
            gt[:, 6] - an[:, 6],
        ],
        axis=1,
    )


def decode(res, anchors) -> np.ndarray:
    res = np.atleast_2d(np.asarray(res, dtype=np.float64))
    an = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    diag = np.sqrt(an[:, 4] ** 2 + an[:, 5] ** 2)
    return np.stack(
        [
            res[:, 0] * diag + an[:, 0],
            res[:, 1] * an[:, 3] + an[:, 1],
            res[:, 2] * diag + an[:, 2],
            np.exp(res[:, 3]) * an[:, 3],
            np.exp(res[:, 4]) * an[:, 4],
            np.exp(res[:, 5]) * an[:, 5],
            res[:, 6] + an[:, 6],
        ],
        axis=1,
    )


# ---------------------------------------------------------------------------
# rotated IoU
# ---------------------------------------------------------------------------


def _as_box(b) -> np.ndarray:
    if isinstance(b, Box3D):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)


def bev_corners(box) -> np.ndarray:
    """Counter-clockwise ``(4, 2)`` footprint in the ``(x, z)`` plane."""
    x, _, z, _, w, l, yaw = _as_box(box)
    c, s = math.cos(yaw), math.sin(yaw)
    along = np.array([1.0, -1.0, -1.0, 1.0]) * l / 2
    across = np.array([1.0, 1.0, -1.0, -1.0]) * w / 2
    pts = np.stack([x + c * along + s * across, z - s * along + c * across], axis=1)
    if polygon_area(pts) < 0:
        pts = pts[::-1]
    return pts


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject, clipper) -> list:
    """Sutherland-Hodgman clipping of ``subject`` by a convex CCW ``clipper``."""
    out = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clipper]
    for i in range(len(clip)):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % len(clip)]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return out


def _bev_intersection(a: np.ndarray, b: np.ndarray) -> float:
    ra = 0.5 * math.hypot(a[4], a[5])
    rb = 0.5 * math.hypot(b[4], b[5])
    if math.hypot(a[0] - b[0], a[2] - b[2]) > ra + rb:
        return 0.0
    poly = clip_polygon(bev_corners(a), bev_corners(b))
    return max(polygon_area(poly), 0.0) if len(poly) >= 3 else 0.0


def rotated_iou_bev(a, b) -> float:
    a, b = _as_box(a), _as_box(b)
    area_a, area_b = a[4] * a[5], b[4] * b[5]
    if area_a < AREA_EPS or area_b < AREA_EPS:
        return 0.0
    inter = _bev_intersection(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > AREA_EPS else 0.0


def iou_3d(a, b) -> float:
    """3D IoU; boxes span ``[y - h, y]`` vertically."""
    a, b = _as_box(a), _as_box(b)
    vol_a, vol_b = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    if vol_a < AREA_EPS or vol_b < AREA_EPS:
        return 0.0
    overlap_y = min(a[1], b[1]) - max(a[1] - a[3], b[1] - b[3])
    if overlap_y <= 0:
        return 0.0
    inter = _bev_intersection(a, b) * overlap_y
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > AREA_EPS else 0.0


def iou_matrix(boxes_a, boxes_b, fn=rotated_iou_bev) -> np.ndarray:
    boxes_a = np.reshape(np.asarray(boxes_a, dtype=np.float64), (-1, 7))
    boxes_b = np.reshape(np.asarray(boxes_b, dtype=np.float64), (-1, 7))
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if out.size == 0:
        return out
    # cheap circle test before polygon clipping
    ra = 0.5 * np.hypot(boxes_a[:, 4], boxes_a[:, 5])
    rb = 0.5 * np.hypot(boxes_b[:, 4], boxes_b[:, 5])
    dist = np.hypot(boxes_a[:, None, 0] - boxes_b[None, :, 0], boxes_a[:, None, 2] - boxes_b[None, :, 2])
    for i, j in zip(*np.nonzero(dist <= ra[:, None] + rb[None, :])):
        out[i, j] = fn(boxes_a[i], boxes_b[j])
    return out


# ---------------------------------------------------------------------------
# targets and losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Targets:
    labels: np.ndarray  # (A,) 1 positive, 0 negative, -1 ignored
    matched_gt: np.ndarray  # (A,) gt index or -1
    residuals: np.ndarray  # (A, 7), zero for non-positives
    dir_bins: np.ndarray  # (A,) int, meaningful for positives
    gt_boxes: np.ndarray  # (A, 7) matched box, zero for non-positives


def direction_bins(gt_yaw, anchor_yaw) -> np.ndarray:
    """Bin 0 when ``(gt_yaw - anchor_yaw) mod 2*pi`` lies in ``[0, pi)``, else 1."""
    rel = np.mod(np.asarray(gt_yaw, dtype=np.float64) - np.asarray(anchor_yaw, dtype=np.float64), 2 * math.pi)
    return (rel >= math.pi).astype(np.int64)


def assign_targets(anchors, gt_boxes, cfg: LossConfig = LossConfig()) -> Targets:
    """IoU matching in BEV.

    An anchor is positive when its best IoU reaches ``pos_iou`` or it is the
    best anchor of some ground truth (with IoU > 0); negative below
    ``neg_iou``; ignored otherwise.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.reshape(np.asarray(gt_boxes, dtype=np.float64), (-1, 7))
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt):
        ious = iou_matrix(anchors, gt)
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(n), best_gt]
        labels[(best_iou >= cfg.neg_iou) & (best_iou < cfg.pos_iou)] = -1
        pos = best_iou >= cfg.pos_iou
        matched[pos] = best_gt[pos]
        for j in range(len(gt)):
            col = ious[:, j]
            if col.max() > 0:
                i = int(np.argmax(col))
                pos[i] = True
                matched[i] = j
        labels[pos] = 1
    residuals = np.zeros((n, 7))
    boxes = np.zeros((n, 7))
    dirs = np.zeros(n, dtype=np.int64)
    pos_idx = np.nonzero(labels == 1)[0]
    if len(pos_idx):
        boxes[pos_idx] = gt[matched[pos_idx]]
        residuals[pos_idx] = encode(boxes[pos_idx], anchors[pos_idx])
        dirs[pos_idx] = direction_bins(boxes[pos_idx, 6], anchors[pos_idx, 6])
    return Targets(labels, matched, residuals, dirs, boxes)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_loss(logits, labels, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Per-element binary focal loss; ``labels`` in {0, 1}."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-x))
    p_t = np.where(y == 1, p, 1.0 - p)
    alpha_t = np.where(y == 1, alpha, 1.0 - alpha)
    log_p_t = np.where(y == 1, _log_sigmoid(x), _log_sigmoid(-x))
    return -alpha_t * (1.0 - p_t) ** gamma * log_p_t


def smooth_l1(diff, beta: float) -> np.ndarray:
    a = np.abs(np.asarray(diff, dtype=np.float64))
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def losses(cls_logits, residuals, dir_logits, anchors, targets: Targets, cfg: LossConfig = LossConfig()) -> dict:
    """The four detection loss terms and their unweighted sum.

    * ``cls``: focal loss over non-ignored anchors, divided by ``max(1, P)``
    * ``l1``: smooth-L1 over the 7 residuals of positives, divided by ``P``
    * ``dir``: two-bin cross entropy, mean over positives
    * ``iou``: mean of ``1 - iou_3d(decoded, gt)`` over positives

    ``P`` is the number of positive anchors.  Without positives the last
    three terms are 0 and ``no_positives`` is set.
    """
    cls_logits = np.asarray(cls_logits, dtype=np.float64).reshape(-1)
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    dir_logits = np.asarray(dir_logits, dtype=np.float64).reshape(-1, 2)
    labels = targets.labels
    pos = np.nonzero(labels == 1)[0]
    n_pos = len(pos)
    care = labels >= 0
    l_cls = float(focal_loss(cls_logits[care], labels[care], cfg.focal_alpha, cfg.focal_gamma).sum()) / max(1, n_pos)
    out = {"cls": l_cls, "l1": 0.0, "dir": 0.0, "iou": 0.0, "no_positives": n_pos == 0, "num_positives": n_pos}
    if n_pos:
        diff = residuals[pos] - targets.residuals[pos]
        out["l1"] = float(smooth_l1(diff, cfg.smooth_l1_beta).sum()) / n_pos
        logits = dir_logits[pos]
        lse = np.logaddexp(logits[:, 0], logits[:, 1])
        out["dir"] = float(np.mean(lse - logits[np.arange(n_pos), targets.dir_bins[pos]]))
        boxes = decode(residuals[pos], np.asarray(anchors)[pos])
        ious = np.array([iou_3d(b, g) for b, g in zip(boxes, targets.gt_boxes[pos])])
        out["iou"] = float(np.mean(1.0 - ious))
    out["total"] = out["cls"] + out["l1"] + out["dir"] + out["iou"]
    return out


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadOutputs:
    cls_logits: np.ndarray  # (A,)
    residuals: np.ndarray  # (A, 7)
    dir_logits: np.ndarray  # (A, 2)


def make_head(in_channels: int, seed: int = 0) -> ConvKernel:
    """Seeded 1x1 head (seed ``seed + 31``): 2 x (1 score, 7 residuals, 2 direction) outputs."""
    return seeded_kernel(seed + 31, 2 * 10, in_channels, 1, 1)


def head_stub(features, kernel: ConvKernel, logit_scale: float = 40.0) -> HeadOutputs:
    """Per-anchor head outputs from ``features[C, X, Z]``.

    Raw fixture outputs are tiny; ``logit_scale`` spreads the score logits so
    the stub yields a usable score range.
    """
    raw = conv2d(features, kernel)  # [20, X, Z]
    _, X, Z = raw.shape
    per = raw.reshape(2, 10, X, Z).transpose(2, 3, 0, 1).reshape(X * Z * 2, 10)
    return HeadOutputs(per[:, 0] * logit_scale, per[:, 1:8], per[:, 8:10])


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy rotated-BEV NMS; ties in score keep the lower index first."""
    boxes = np.reshape(np.asarray(boxes, dtype=np.float64), (-1, 7))
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return keep


def _wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), 2 * math.pi)


def decode_detections(head: HeadOutputs, anchors, score_thresh: float = 0.5, nms_iou: float = 0.01, label: str = "Car", max_candidates: int = 500) -> list[Box3D]:
    """Threshold, decode, fix heading from the direction bin, then NMS.

    Candidates are ranked by score (ties by anchor index) and at most
    ``max_candidates`` enter NMS.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    scores = 1.0 / (1.0 + np.exp(-np.asarray(head.cls_logits, dtype=np.float64)))
    cand = np.nonzero(scores > score_thresh)[0]
    if len(cand) == 0:
        return []
    cand = np.array(sorted(cand, key=lambda i: (-scores[i], i))[:max_candidates], dtype=np.int64)
    boxes = decode(head.residuals[cand], anchors[cand])
    bins = np.argmax(head.dir_logits[cand], axis=1)
    rel = np.mod(boxes[:, 6] - anchors[cand, 6], math.pi)
    boxes[:, 6] = _wrap_angle(anchors[cand, 6] + rel + math.pi * bins)
    keep = nms(boxes, scores[cand], nms_iou)
    return [Box3D.from_array(boxes[k], label=label, score=float(scores[cand[k]])) for k in keep]
