"""Anchors, residual targets, the detection losses, NMS and KITTI-style AP."""

import math

import numpy as np

from stereogeo import detect
from stereogeo.egfg import VoxelSpec
from stereogeo.evaluation import evaluate, format_table
from stereogeo.kitti_io import Box3D, Label

spec = VoxelSpec((-8.0, 8.0), (-1.0, 3.0), (2.0, 26.0), (0.8, 0.8, 0.8))
anchors = detect.make_anchors(spec)
gt = np.array([[1.0, 1.7, 8.0, 1.5, 1.6, 3.9, 0.2], [-4.0, 1.6, 15.0, 1.5, 1.7, 4.1, -2.0]])
targets = detect.assign_targets(anchors, gt)
print("anchors", len(anchors), "positives", int((targets.labels == 1).sum()), "ignored", int((targets.labels == -1).sum()))

# a noisy prediction and a perfect one
rng = np.random.default_rng(0)
noisy = detect.losses(rng.normal(size=len(anchors)), targets.residuals + 0.1 * rng.normal(size=(len(anchors), 7)),
                      rng.normal(size=(len(anchors), 2)), anchors, targets)
logits = np.where(targets.labels == 1, 20.0, -20.0)
dirs = np.zeros((len(anchors), 2))
dirs[np.arange(len(anchors)), targets.dir_bins] = 20.0
perfect = detect.losses(logits, targets.residuals, dirs, anchors, targets)
for name, d in (("noisy", noisy), ("perfect", perfect)):
    print(name, " ".join(f"{k}={d[k]:.3g}" for k in ("cls", "l1", "dir", "iou", "total")))

# rotated IoU: two 2x2 squares, one turned by 45 degrees
a = np.array([0.0, 0, 0, 1, 2, 2, 0])
b = a.copy()
b[6] = math.pi / 4
print("square vs rotated square IoU", round(detect.rotated_iou_bev(a, b), 6))

# decode the perfect head and evaluate it against the ground truth
head = detect.HeadOutputs(logits, targets.residuals, dirs)
dets = detect.decode_detections(head, anchors, nms_iou=0.1)
bbox = (100.0, 100.0, 150.0, 160.0)
gt_labels = [Label(Box3D.from_array(g), 0.0, 0, -10.0, bbox) for g in gt]
det_labels = [Label(d, 0.0, 0, -10.0, bbox) for d in dets]
print("detections after NMS", len(dets))
print(format_table(evaluate([gt_labels], [det_labels])))
