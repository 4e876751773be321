"""KITTI-style average precision for 3D and BEV car detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detect import iou_3d, rotated_iou_bev
from .kitti_io import Label

__all__ = [
    "DifficultyBucket",
    "BUCKETS",
    "FrameAssignment",
    "PRCurve",
    "EvalRow",
    "gt_status",
    "iou_2d",
    "match",
    "average_precision",
    "evaluate",
    "format_table",
    "format_lines",
]


@dataclass(frozen=True)
class DifficultyBucket:
    name: str
    min_height: float
    max_occlusion: int
    max_truncation: float

    def admits(self, lab: Label) -> bool:
        return (
            lab.height_px >= self.min_height
            and lab.occluded <= self.max_occlusion
            and lab.truncated <= self.max_truncation
        )


BUCKETS = (
    DifficultyBucket("easy", 40, 0, 0.15),
    DifficultyBucket("moderate", 25, 1, 0.30),
    DifficultyBucket("hard", 25, 2, 0.50),
)

# classes that neither count nor penalise when evaluating the key class
NEIGHBOUR_CLASSES = {"Car": {"Van"}, "Pedestrian": {"Person_sitting"}}


def gt_status(lab: Label, bucket: DifficultyBucket, cls: str = "Car") -> int:
    """1 counted, 0 ignored (wrong bucket or neighbouring class), -1 unrelated."""
    if lab.cls == cls:
        return 1 if bucket.admits(lab) else 0
    if lab.cls in NEIGHBOUR_CLASSES.get(cls, ()):
        return 0
    return -1


def iou_2d(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class FrameAssignment:
    tp_scores: list = field(default_factory=list)
    fp_scores: list = field(default_factory=list)
    ignored: int = 0
    num_gt: int = 0

    @property
    def num_tp(self) -> int:
        return len(self.tp_scores)

    @property
    def num_fp(self) -> int:
        return len(self.fp_scores)

    @property
    def num_fn(self) -> int:
        return self.num_gt - self.num_tp


def match(dets, gts, iou_fn, threshold: float, bucket: DifficultyBucket = BUCKETS[2], cls: str = "Car") -> FrameAssignment:
    """Greedy matching of one frame's detections to its ground truth.

    Detections are visited by descending score.  Each takes the unmatched
    counted ground truth with the highest IoU above ``threshold`` (TP).
    Failing that, a detection that overlaps an unmatched ignored ground
    truth, overlaps a DontCare region (2D IoU > 0.5) or is shorter than the
    bucket's minimum height is ignored; anything else is a FP.
    """
    dets = [d for d in dets if d.cls == cls]
    order = sorted(range(len(dets)), key=lambda i: (-(dets[i].score or 0.0), i))
    status = [gt_status(g, bucket, cls) for g in gts]
    relevant = [j for j, s in enumerate(status) if s >= 0]
    dontcare = [g.bbox for g in gts if g.dontcare]
    taken = set()
    out = FrameAssignment(num_gt=sum(1 for s in status if s == 1))
    for i in order:
        det = dets[i]
        ious = {j: iou_fn(det.box, gts[j].box) for j in relevant if j not in taken}
        best, best_iou = None, threshold
        for j, v in ious.items():
            if status[j] == 1 and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken.add(best)
            out.tp_scores.append(det.score or 0.0)
            continue
        ign = [j for j, v in ious.items() if status[j] == 0 and v > threshold]
        if ign:
            taken.add(max(ign, key=lambda j: (ious[j], -j)))
            out.ignored += 1
        elif any(iou_2d(det.bbox, dc) > 0.5 for dc in dontcare) or det.height_px < bucket.min_height:
            out.ignored += 1
        else:
            out.fp_scores.append(det.score or 0.0)
    return out


@dataclass(frozen=True)
class PRCurve:
    recall_points: np.ndarray
    precision: np.ndarray  # interpolated precision at each recall point
    ap: float


def _recall_points(n: int) -> np.ndarray:
    if n == 40:
        return np.arange(1, 41) / 40.0
    if n == 11:
        return np.arange(0, 11) / 10.0
    raise ValueError(f"recall points must be 11 or 40, got {n}")


def average_precision(assignments, recall_points: int = 40) -> PRCurve | None:
    """Interpolated AP over a dataset; ``None`` when there is no ground truth.

    The score threshold sweeps every distinct detection score (equal scores
    enter together).  Precision at recall ``r`` is the best precision among
    thresholds reaching recall ``r``.
    """
    n_gt = sum(a.num_gt for a in assignments)
    if n_gt == 0:
        return None
    scores = np.array([s for a in assignments for s in a.tp_scores] + [s for a in assignments for s in a.fp_scores], dtype=np.float64)
    is_tp = np.array([1] * sum(a.num_tp for a in assignments) + [0] * sum(a.num_fp for a in assignments), dtype=np.int64)
    rp = _recall_points(recall_points)
    if scores.size == 0:
        return PRCurve(rp, np.zeros_like(rp), 0.0)
    order = np.argsort(-scores, kind="stable")
    scores, is_tp = scores[order], is_tp[order]
    cum_tp = np.cumsum(is_tp)
    cum_fp = np.cumsum(1 - is_tp)
    # last index of each run of equal scores
    ends = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]
    recall = cum_tp[ends] / n_gt
    precision = cum_tp[ends] / (cum_tp[ends] + cum_fp[ends])
    interp = np.array([precision[recall >= r].max() if np.any(recall >= r) else 0.0 for r in rp])
    return PRCurve(rp, interp, float(100.0 * interp.mean()))


@dataclass(frozen=True)
class EvalRow:
    cls: str
    metric: str  # "AP3D" or "APBEV"
    bucket: str
    iou: float
    ap: float | None


METRICS = {"AP3D": iou_3d, "APBEV": rotated_iou_bev}


def evaluate(gt_frames, det_frames, thresholds=(0.7, 0.5), recall_points: int = 40, cls: str = "Car") -> list[EvalRow]:
    """AP for each metric, IoU threshold and bucket.

    ``gt_frames`` and ``det_frames`` are parallel sequences of label lists.
    """
    if len(gt_frames) != len(det_frames):
        raise ValueError("need one detection list per ground-truth frame")
    rows = []
    for metric, fn in METRICS.items():
        for thr in thresholds:
            for bucket in BUCKETS:
                assigns = [match(d, g, fn, thr, bucket, cls) for g, d in zip(gt_frames, det_frames)]
                curve = average_precision(assigns, recall_points)
                rows.append(EvalRow(cls, metric, bucket.name, thr, None if curve is None else curve.ap))
    return rows


def format_lines(rows) -> str:
    out = []
    for r in rows:
        ap = "absent" if r.ap is None else f"{r.ap:.4f}"
        out.append(f"class={r.cls} metric={r.metric} bucket={r.bucket} iou={r.iou:.2f} ap={ap}")
    return "\n".join(out)


def format_table(rows) -> str:
    names = [b.name for b in BUCKETS]
    header = f"{'metric':<8}{'iou':>6}" + "".join(f"{n:>11}" for n in names)
    lines = [header, "-" * len(header)]
    keyed = {(r.metric, r.iou, r.bucket): r.ap for r in rows}
    for metric, iou in dict.fromkeys((r.metric, r.iou) for r in rows):
        cells = []
        for n in names:
            ap = keyed.get((metric, iou, n))
            cells.append(f"{'-':>11}" if ap is None else f"{ap:>11.2f}")
        lines.append(f"{metric:<8}{iou:>6.2f}" + "".join(cells))
    return "\n".join(lines)
