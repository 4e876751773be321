"""Command-line front end.

Subcommands::

    stereogeo pipeline --config run.ini [--dump f_gf3,f_sv1] [--frames 000000,000001] [--threads 4]
    stereogeo distill  --config run.ini [--frames ...] [--threads ...]
    stereogeo eval     GT_DIR DET_DIR [--recall-points 40]
    stereogeo viz      --config run.ini --frames 000000 [--detections DIR]
    stereogeo selftest

Configuration is an INI file; every key is optional except ``[paths] root``
(or the individual path keys)::

    [paths]
    root = data/training          ; holds calib/ image_2/ image_3/ velodyne/ label_2/
    output = out
    [pyramid]
    strides = 4, 8, 16
    channels = 8
    bev_channels = 16
    disparities = 24
    max_disparity_px = 192
    kernel_size = 3
    [voxel]
    x_range = -30, 30
    y_range = -1, 3
    z_range = 2, 59.6
    size = 0.4, 0.8, 0.4
    [lidar]
    size = 0.05, 0.1, 0.05
    [seeds]
    seed = 0                      ; ESGN_SEED in the environment overrides this
    [head]
    score_thresh = 0.5
    nms_iou = 0.01
    max_candidates = 200
    anchor_size = 1.56, 1.6, 3.9
    anchor_y = 1.78
    [loss]
    focal_alpha = 0.25
    focal_gamma = 2.0
    smooth_l1_beta = 0.1111111111111111
    pos_iou = 0.6
    neg_iou = 0.45
    [distill]
    student = pipeline            ; or a directory of <frame>/f_gf{1,2,3}.esgt
    teacher = lidar               ; or "student", or a directory of <frame>/f_lgf{1,2,3}.esgt
    adapter = seeded              ; or "identity"
    per_scale_n = false
    [eval]
    recall_points = 40
    thresholds = 0.7, 0.5

Every line of normal output is ``key=value`` text.  Exit status is 0 only when
no frame failed.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dgfd, detect, evaluation
from .egfg import PyramidConfig, VoxelSpec, make_weights, run_egfg
from .gridcore import identity_kernel, read_tensor, write_tensor
from .kitti_io import (
    Box3D,
    Frame,
    Label,
    box_corners,
    find_image,
    parse_calib,
    parse_labels,
    read_image,
    read_velodyne,
    project_to_image,
    serialize_labels,
    velo_to_cam,
)

EXIT_FRAME_FAILED = 1
EXIT_USAGE = 2
EXIT_STEM_MISMATCH = 3


class StageError(RuntimeError):
    def __init__(self, frame_id: str, stage: str, cause: BaseException):
        super().__init__(f"frame={frame_id} stage={stage} error={cause}")
        self.frame_id, self.stage, self.cause = frame_id, stage, cause


@dataclass
class RunConfig:
    calib: Path
    image_left: Path
    image_right: Path
    velodyne: Path
    labels: Path
    output: Path
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    voxel: VoxelSpec = field(default_factory=VoxelSpec)
    lidar: dgfd.LidarVoxelSpec = field(default_factory=dgfd.LidarVoxelSpec)
    seed: int = 0
    loss: detect.LossConfig = field(default_factory=detect.LossConfig)
    score_thresh: float = 0.5
    nms_iou: float = 0.01
    max_candidates: int = 200
    anchor_size: tuple = (1.56, 1.6, 3.9)
    anchor_y: float = 1.78
    student: str = "pipeline"
    teacher: str = "lidar"
    adapter: str = "seeded"
    per_scale_n: bool = False
    recall_points: int = 40
    thresholds: tuple = (0.7, 0.5)

    @property
    def root(self) -> Path:
        return self.calib.parent


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _source(value: str, base: Path, keywords) -> str:
    if value in keywords:
        return value
    q = Path(value)
    return str(q if q.is_absolute() else base / q)


def _image_channels(img) -> int:
    return 1 if np.ndim(img) == 2 else int(np.shape(img)[0])


def load_config(path, env=None) -> RunConfig:
    env = os.environ if env is None else env
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read(path)
    base = path.parent

    def p(key, default=None):
        val = cp.get("paths", key, fallback=None)
        if val is None:
            if default is None:
                raise ValueError(f"config needs [paths] {key} or [paths] root")
            return default
        q = Path(val)
        return q if q.is_absolute() else base / q

    root_val = cp.get("paths", "root", fallback=None)
    root = None if root_val is None else (Path(root_val) if Path(root_val).is_absolute() else base / root_val)

    def under(name):
        return None if root is None else root / name

    pyr = PyramidConfig(
        strides=tuple(int(v) for v in _floats(cp.get("pyramid", "strides", fallback="4 8 16"))),
        channels=cp.getint("pyramid", "channels", fallback=8),
        bev_channels=cp.getint("pyramid", "bev_channels", fallback=16),
        disparities=cp.getint("pyramid", "disparities", fallback=24),
        max_disparity_px=cp.getint("pyramid", "max_disparity_px", fallback=192),
        kernel_size=cp.getint("pyramid", "kernel_size", fallback=3),
    )
    voxel = VoxelSpec(
        _floats(cp.get("voxel", "x_range", fallback="-30 30")),
        _floats(cp.get("voxel", "y_range", fallback="-1 3")),
        _floats(cp.get("voxel", "z_range", fallback="2 59.6")),
        _floats(cp.get("voxel", "size", fallback="0.4 0.8 0.4")),
    )
    lidar = dgfd.LidarVoxelSpec.matching(voxel, _floats(cp.get("lidar", "size", fallback="0.05 0.1 0.05")))
    lidar.pooling_factors(voxel)
    seed = cp.getint("seeds", "seed", fallback=0)
    if env.get("ESGN_SEED"):
        seed = int(env["ESGN_SEED"])
    loss = detect.LossConfig(
        focal_alpha=cp.getfloat("loss", "focal_alpha", fallback=0.25),
        focal_gamma=cp.getfloat("loss", "focal_gamma", fallback=2.0),
        smooth_l1_beta=cp.getfloat("loss", "smooth_l1_beta", fallback=1.0 / 9.0),
        pos_iou=cp.getfloat("loss", "pos_iou", fallback=0.6),
        neg_iou=cp.getfloat("loss", "neg_iou", fallback=0.45),
    )
    cfg = RunConfig(
        calib=p("calib", under("calib")),
        image_left=p("image_left", under("image_2")),
        image_right=p("image_right", under("image_3")),
        velodyne=p("velodyne", under("velodyne") or base / "velodyne"),
        labels=p("labels", under("label_2") or base / "label_2"),
        output=p("output", base / "out"),
        pyramid=pyr,
        voxel=voxel,
        lidar=lidar,
        seed=seed,
        loss=loss,
        score_thresh=cp.getfloat("head", "score_thresh", fallback=0.5),
        nms_iou=cp.getfloat("head", "nms_iou", fallback=0.01),
        max_candidates=cp.getint("head", "max_candidates", fallback=200),
        anchor_size=_floats(cp.get("head", "anchor_size", fallback="1.56 1.6 3.9")),
        anchor_y=cp.getfloat("head", "anchor_y", fallback=1.78),
        student=_source(cp.get("distill", "student", fallback="pipeline"), base, ("pipeline",)),
        teacher=_source(cp.get("distill", "teacher", fallback="lidar"), base, ("lidar", "student")),
        adapter=cp.get("distill", "adapter", fallback="seeded"),
        per_scale_n=cp.getboolean("distill", "per_scale_n", fallback=False),
        recall_points=cp.getint("eval", "recall_points", fallback=40),
        thresholds=_floats(cp.get("eval", "thresholds", fallback="0.7 0.5")),
    )
    for name in ("calib", "image_left", "image_right"):
        if not getattr(cfg, name).is_dir():
            raise FileNotFoundError(f"{name} directory not found: {getattr(cfg, name)}")
    return cfg


def _frame_ids(cfg: RunConfig, frames_arg: str | None) -> list[str]:
    if frames_arg:
        return [f.strip() for f in frames_arg.split(",") if f.strip()]
    return sorted(p.stem for p in cfg.calib.glob("*.txt"))


def _load(cfg: RunConfig, fid: str, points=False, labels=False):
    calib_path = cfg.calib / f"{fid}.txt"
    if not calib_path.exists():
        raise FileNotFoundError(f"calibration file not found: {calib_path}")
    rig = parse_calib(calib_path.read_text())
    left = read_image(find_image(cfg.image_left, fid))
    right = read_image(find_image(cfg.image_right, fid))
    pts = np.zeros((0, 4), dtype=np.float32)
    if points:
        vp = cfg.velodyne / f"{fid}.bin"
        if not vp.exists():
            raise FileNotFoundError(f"velodyne file not found: {vp}")
        pts = read_velodyne(vp.read_bytes())
    labs = ()
    if labels:
        lp = cfg.labels / f"{fid}.txt"
        if not lp.exists():
            raise FileNotFoundError(f"label file not found: {lp}")
        labs = tuple(parse_labels(lp.read_text()))
    return Frame(fid, rig, left, right, pts, labs)


def _run_frames(fids, fn, threads: int):
    """Apply ``fn`` to every frame, returning results in input order."""
    def safe(fid):
        try:
            return fid, fn(fid), None
        except StageError as exc:
            return fid, None, exc
        except Exception as exc:  # noqa: BLE001 - reported per frame
            return fid, None, StageError(fid, "unknown", exc)

    if threads <= 1:
        return [safe(f) for f in fids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(safe, fids))


def _staged(fid, stage, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(fid, stage, exc) from exc


def _bbox_2d(box: Box3D, frame) -> tuple:
    h, w = np.asarray(frame.left).shape[-2:]
    uv, depth = project_to_image(box_corners(box), frame.rig.P_left)
    if np.any(depth <= 0):
        return (0.0, 0.0, 0.0, 0.0)
    x0, y0 = np.clip(uv.min(axis=0), 0, [w - 1, h - 1])
    x1, y1 = np.clip(uv.max(axis=0), 0, [w - 1, h - 1])
    return (float(x0), float(y0), float(x1), float(y1))


def pipeline_frame(cfg: RunConfig, fid: str, dump=()):
    frame = _staged(fid, "load", _load, cfg, fid)
    weights = make_weights(cfg.pyramid, cfg.voxel, cfg.seed, image_channels=_image_channels(frame.left))
    out = _staged(fid, "egfg", run_egfg, frame.left, frame.right, frame.rig, cfg.pyramid, cfg.voxel, weights)
    anchors = detect.make_anchors(cfg.voxel, cfg.anchor_size, cfg.anchor_y)
    head_in = out.head_input
    kernel = detect.make_head(head_in.shape[0], cfg.seed)
    head = _staged(fid, "head", detect.head_stub, head_in, kernel)
    boxes = _staged(
        fid, "decode", detect.decode_detections, head, anchors, cfg.score_thresh, cfg.nms_iou, "Car", cfg.max_candidates
    )
    labels = [Label(b, 0.0, 0, -10.0, _bbox_2d(b, frame)) for b in boxes]
    tensors = out.tensors()
    tensors["head_cls"] = head.cls_logits[None]
    unknown = [n for n in dump if n not in tensors]
    if unknown:
        raise StageError(fid, "dump", KeyError(f"unknown tensor(s) {unknown}; known: {sorted(tensors)}"))
    return labels, {n: tensors[n] for n in dump}


def cmd_pipeline(args, out=sys.stdout, err=sys.stderr) -> int:
    cfg = load_config(args.config)
    dump = [d.strip() for d in (args.dump or "").split(",") if d.strip()]
    fids = _frame_ids(cfg, args.frames)
    results = _run_frames(fids, lambda f: pipeline_frame(cfg, f, dump), args.threads)
    failed = 0
    det_dir = cfg.output / "detections"
    det_dir.mkdir(parents=True, exist_ok=True)
    for fid, res, exc in results:
        if exc is not None:
            failed += 1
            print(str(exc), file=err)
            continue
        labels, tensors = res
        (det_dir / f"{fid}.txt").write_text(serialize_labels(labels))
        if tensors:
            tdir = cfg.output / "tensors" / fid
            tdir.mkdir(parents=True, exist_ok=True)
            for name, t in tensors.items():
                write_tensor(tdir / f"{name}.esgt", t)
        print(f"frame={fid} status=ok detections={len(labels)} dumped={len(tensors)}", file=out)
    print(f"frames={len(fids)} failed={failed}", file=out)
    return EXIT_FRAME_FAILED if failed else 0


def _load_scales(directory: Path, fid: str, prefix: str) -> list[np.ndarray]:
    paths = [directory / fid / f"{prefix}{i}.esgt" for i in (1, 2, 3)]
    for q in paths:
        if not q.exists():
            raise FileNotFoundError(f"feature dump not found: {q}")
    return [read_tensor(q).astype(np.float64) for q in paths]


def distill_frame(cfg: RunConfig, fid: str) -> dgfd.DistillResult:
    frame = _staged(fid, "load", _load, cfg, fid, points=True, labels=True)
    if cfg.student == "pipeline":
        weights = make_weights(cfg.pyramid, cfg.voxel, cfg.seed, image_channels=_image_channels(frame.left))
        student = _staged(fid, "egfg", run_egfg, frame.left, frame.right, frame.rig, cfg.pyramid, cfg.voxel, weights).f_gf
    else:
        student = _staged(fid, "student", _load_scales, Path(cfg.student), fid, "f_gf")
    pts_cam = _staged(fid, "points", velo_to_cam, frame.points, frame.rig)
    if cfg.teacher == "student":
        teacher = [s.copy() for s in student]
    elif cfg.teacher == "lidar":
        grid = _staged(fid, "voxelize", dgfd.voxelize, pts_cam, cfg.lidar)
        tw = dgfd.make_teacher_weights(cfg.lidar, cfg.voxel, cfg.pyramid.channels, cfg.pyramid.bev_channels, cfg.seed, cfg.pyramid.kernel_size)
        teacher = _staged(fid, "teacher", dgfd.teacher_features, grid, cfg.lidar, cfg.voxel, tw)
    else:
        teacher = _staged(fid, "teacher", _load_scales, Path(cfg.teacher), fid, "f_lgf")
    cb = student[0].shape[0]
    if cfg.adapter == "identity":
        adapters = (identity_kernel(cb),) * 3
    else:
        adapters = dgfd.make_adapters(cb, cfg.seed)
    m_fg = dgfd.build_fg_mask(frame.gt_boxes, cfg.voxel)
    m_sp = dgfd.build_sparse_mask(pts_cam, cfg.voxel)
    return _staged(fid, "loss", dgfd.distill_loss, student, teacher, adapters, m_fg, m_sp, cfg.per_scale_n)


def cmd_distill(args, out=sys.stdout, err=sys.stderr) -> int:
    cfg = load_config(args.config)
    fids = _frame_ids(cfg, args.frames)
    results = _run_frames(fids, lambda f: distill_frame(cfg, f), args.threads)
    failed = 0
    done = []
    for fid, res, exc in results:
        if exc is not None:
            failed += 1
            print(str(exc), file=err)
            continue
        done.append(res)
        for i, v in enumerate(res.per_scale, start=1):
            print(f"frame={fid} scale={i} loss={v!r}", file=out)
        print(f"frame={fid} total={res.total!r} active_cells={res.active_cells}", file=out)
    if done:
        for i in range(3):
            print(f"scale={i + 1} loss={float(np.mean([r.per_scale[i] for r in done]))!r}", file=out)
        print(f"total={float(np.mean([r.total for r in done]))!r}", file=out)
    print(f"frames={len(fids)} failed={failed}", file=out)
    return EXIT_FRAME_FAILED if failed else 0


def cmd_eval(args, out=sys.stdout, err=sys.stderr) -> int:
    gt_dir, det_dir = Path(args.gt_dir), Path(args.det_dir)
    for d in (gt_dir, det_dir):
        if not d.is_dir():
            print(f"error: directory not found: {d}", file=err)
            return EXIT_USAGE
    gt_stems = sorted(p.stem for p in gt_dir.glob("*.txt"))
    det_stems = {p.stem for p in det_dir.glob("*.txt")}
    mismatched = 0
    for stem in sorted(det_stems - set(gt_stems)):
        mismatched += 1
        print(f"warning: detections for {stem} have no ground truth; skipped", file=err)
    gts, dets = [], []
    for stem in gt_stems:
        gts.append(parse_labels((gt_dir / f"{stem}.txt").read_text()))
        if stem in det_stems:
            dets.append(parse_labels((det_dir / f"{stem}.txt").read_text()))
        else:
            mismatched += 1
            print(f"warning: no detections file for {stem}; evaluated as empty", file=err)
            dets.append([])
    rows = evaluation.evaluate(gts, dets, args.thresholds, args.recall_points)
    print(evaluation.format_table(rows), file=out)
    print(evaluation.format_lines(rows), file=out)
    print(f"frames={len(gt_stems)} mismatched={mismatched}", file=out)
    return EXIT_STEM_MISMATCH if mismatched else 0


# ---------------------------------------------------------------------------
# visualisation
# ---------------------------------------------------------------------------

BOX_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]


def render_ppm(image, boxes, rig) -> bytes:
    """P6 image: greyscale background, green box edges, red corner pixels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    h, w = img.shape
    grey = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(grey[:, :, None], 3, axis=2)
    corners_px = []
    for box in boxes:
        uv, depth = project_to_image(box_corners(box), rig.P_left)
        if np.any(depth <= 0):
            continue
        for a, b in BOX_EDGES:
            n = int(max(abs(uv[b] - uv[a]).max(), 1)) + 1
            for t in np.linspace(0.0, 1.0, n):
                x, y = np.floor(uv[a] + t * (uv[b] - uv[a]) + 0.5).astype(int)
                if 0 <= x < w and 0 <= y < h:
                    rgb[y, x] = (0, 255, 0)
        corners_px.extend(np.floor(uv + 0.5).astype(int))
    for x, y in corners_px:
        if 0 <= x < w and 0 <= y < h:
            rgb[y, x] = (255, 0, 0)
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def render_ply(points_cam, boxes) -> str:
    pts = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    verts = [tuple(p) for p in pts]
    edges = []
    for box in boxes:
        base = len(verts)
        verts.extend(tuple(c) for c in box_corners(box))
        edges.extend((base + a, base + b) for a, b in BOX_EDGES)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(verts)}",
        "property float x",
        "property float y",
        "property float z",
        f"element edge {len(edges)}",
        "property int vertex1",
        "property int vertex2",
        "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in verts]
    lines += [f"{a} {b}" for a, b in edges]
    return "\n".join(lines) + "\n"


def cmd_viz(args, out=sys.stdout, err=sys.stderr) -> int:
    cfg = load_config(args.config)
    fids = _frame_ids(cfg, args.frames)
    vdir = cfg.output / "viz"
    vdir.mkdir(parents=True, exist_ok=True)
    failed = 0
    for fid in fids:
        try:
            has_labels = (cfg.labels / f"{fid}.txt").exists()
            has_points = (cfg.velodyne / f"{fid}.bin").exists()
            frame = _staged(fid, "load", _load, cfg, fid, points=has_points, labels=has_labels)
            boxes = list(frame.gt_boxes)
            if args.detections:
                dp = Path(args.detections) / f"{fid}.txt"
                if dp.exists():
                    boxes += [lab.box for lab in parse_labels(dp.read_text()) if not lab.dontcare]
            (vdir / f"{fid}.ppm").write_bytes(render_ppm(frame.left, boxes, frame.rig))
            (vdir / f"{fid}.ply").write_text(render_ply(velo_to_cam(frame.points, frame.rig), boxes))
            print(f"frame={fid} status=ok boxes={len(boxes)}", file=out)
        except Exception as exc:  # noqa: BLE001
            failed += 1
            print(str(exc if isinstance(exc, StageError) else StageError(fid, "viz", exc)), file=err)
    return EXIT_FRAME_FAILED if failed else 0


def cmd_selftest(args, out=sys.stdout, err=sys.stderr) -> int:
    from .selftest import run_selftest

    return run_selftest(out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereogeo", description="Stereo geometry pipeline tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, frames=True):
        p.add_argument("--config", required=True, help="INI run configuration")
        if frames:
            p.add_argument("--frames", help="comma-separated frame ids (default: every calib file)")
            p.add_argument("--threads", type=int, default=1, help="frames processed concurrently")

    p = sub.add_parser("pipeline", help="run the stereo path and head decode per frame")
    common(p)
    p.add_argument("--dump", help="comma-separated tensor names to write as ESGT files")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("distill", help="report the distillation loss per frame and scale")
    common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="KITTI-style AP for a directory of detections")
    p.add_argument("gt_dir")
    p.add_argument("det_dir")
    p.add_argument("--recall-points", type=int, choices=(11, 40), default=40)
    p.add_argument("--thresholds", type=_floats, default=(0.7, 0.5), help="IoU thresholds, e.g. '0.7,0.5'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="write PPM and PLY renderings of frames")
    common(p)
    p.add_argument("--detections", help="directory of detection label files to overlay")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("selftest", help="run quick internal consistency checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out=out, err=err)
    except (FileNotFoundError, ValueError, configparser.Error) as exc:
        print(f"error: {exc}", file=err)
        if os.environ.get("STEREOGEO_TRACEBACK"):
            traceback.print_exc(file=err)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
