import math

import numpy as np
import pytest

from stereogeo.gridcore import FormatError
from stereogeo.kitti_io import (
    Box3D,
    CameraRig,
    ParseError,
    box_corners,
    lidar_to_depth,
    load_frame,
    make_rig,
    parse_calib,
    parse_labels,
    project_to_image,
    read_pfm,
    read_pgm,
    read_velodyne,
    serialize_calib,
    serialize_labels,
    synthetic_frame,
    velo_to_cam,
    write_frame,
    write_pfm,
    write_pgm,
    write_velodyne,
)

KITTI_CALIB = """P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P3: 7.215377e+02 0.000000e+00 6.095593e+02 -3.861448e+02 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0
"""

CAR_LINE = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59"


class TestCalib:
    def test_kitti_baseline(self):
        rig = parse_calib(KITTI_CALIB)
        assert rig.focal == 721.5377
        # (0 - (-386.1448)) / 721.5377
        assert rig.baseline == pytest.approx(0.535172, abs=1e-5)
        assert round(rig.baseline, 4) == 0.5352

    def test_unit_focal(self):
        text = (
            "P2: 1 0 0 0 0 1 0 0 0 0 1 0\n"
            "P3: 1 0 0 -0.5 0 1 0 0 0 0 1 0\n"
            "R0_rect: 1 0 0 0 1 0 0 0 1\n"
            "Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n"
        )
        assert parse_calib(text).baseline == 0.5

    def test_truncated_line_names_key(self):
        lines = KITTI_CALIB.splitlines()
        lines[2] = " ".join(lines[2].split()[:8])
        with pytest.raises(ParseError, match="P3"):
            parse_calib("\n".join(lines))

    def test_missing_key(self):
        text = "\n".join(line for line in KITTI_CALIB.splitlines() if not line.startswith("R0_rect"))
        with pytest.raises(ParseError, match="R0_rect"):
            parse_calib(text)

    def test_round_trip(self):
        rig = parse_calib(KITTI_CALIB)
        again = parse_calib(serialize_calib(rig))
        for name in ("P_left", "P_right", "R0_rect", "Tr_velo_to_cam"):
            assert np.array_equal(getattr(rig, name), getattr(again, name))

    def test_rig_invariants(self):
        P = np.array([[10.0, 0, 5, 0], [0, 10, 5, 0], [0, 0, 1, 0]])
        with pytest.raises(ValueError):
            CameraRig(P, P)  # zero baseline
        with pytest.raises(ValueError):
            CameraRig(P, P - [[0, 0, 0, 5], [0] * 4, [0] * 4], R0_rect=np.diag([1.0, 2.0, 1.0]))


class TestLabels:
    def test_field_order(self):
        (lab,) = parse_labels(CAR_LINE)
        b = lab.box
        assert (b.x, b.y, b.z, b.h, b.w, b.l, b.yaw) == (-0.65, 1.71, 46.70, 1.65, 1.67, 3.64, -1.59)
        assert b.cls == "Car" and lab.occluded == 0 and lab.truncated == 0.0
        assert lab.bbox == (587.01, 173.33, 614.12, 200.12)
        assert lab.height_px == pytest.approx(26.79)
        assert lab.score is None

    def test_round_trip_normalised(self):
        text = CAR_LINE + "\nDontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n"
        once = serialize_labels(parse_labels(text))
        assert serialize_labels(parse_labels(once)) == once
        assert once.splitlines()[0] == CAR_LINE
        labs = parse_labels(once)
        assert labs[1].dontcare and not labs[0].dontcare

    def test_score_field(self):
        (lab,) = parse_labels(CAR_LINE + " 0.875")
        assert lab.score == 0.875
        assert serialize_labels([lab]).split()[-1] == "0.875000"

    def test_empty(self):
        assert parse_labels("") == []
        assert parse_labels("\n\n") == []

    def test_bad_field_count_names_line(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_labels(CAR_LINE + "\nCar 0 0\n")

    def test_non_numeric(self):
        with pytest.raises(ParseError):
            parse_labels(CAR_LINE.replace("46.70", "abc"))

    def test_box_validation(self):
        with pytest.raises(ValueError):
            Box3D(0, 0, 0, 1, 0, 1, 0)
        with pytest.raises(ValueError):
            Box3D(0, 0, math.nan, 1, 1, 1, 0)


class TestVelodyne:
    def test_single_point(self):
        buf = np.array([1, 2, 3, 0.5], dtype="<f4").tobytes()
        assert read_velodyne(buf).tolist() == [[1.0, 2.0, 3.0, 0.5]]

    def test_empty(self):
        assert read_velodyne(b"").shape == (0, 4)

    def test_round_trip_bit_exact(self):
        pts = np.random.default_rng(0).normal(size=(1000, 4)).astype(np.float32)
        back = read_velodyne(write_velodyne(pts))
        assert back.tobytes() == pts.tobytes()

    def test_bad_length(self):
        with pytest.raises(FormatError):
            read_velodyne(bytes(17))


class TestDepth:
    def test_principal_point(self):
        rig = make_rig(100.0, 20.0, 10.0, 0.5)
        d = lidar_to_depth(np.array([[0.0, 0.0, 10.0, 0.0]]), rig, 21, 41)
        assert d[0, 10, 20] == 10.0
        assert np.count_nonzero(d) == 1

    def test_min_depth_wins(self):
        rig = make_rig(100.0, 20.0, 10.0, 0.5)
        pts = np.array([[0.0, 0.0, 9.0, 0], [0.0, 0.0, 5.0, 0]])
        assert lidar_to_depth(pts, rig, 21, 41)[0, 10, 20] == 5.0

    def test_behind_and_outside_dropped(self):
        rig = make_rig(100.0, 20.0, 10.0, 0.5)
        pts = np.array([[0.0, 0.0, -5.0, 0], [100.0, 0.0, 5.0, 0]])
        assert not lidar_to_depth(pts, rig, 21, 41).any()

    def test_matches_point_loop(self):
        frame = synthetic_frame(3)
        rig = frame.rig
        h, w = 96, 320
        pts = frame.points[np.random.default_rng(0).choice(len(frame.points), 500, replace=False)]
        got = lidar_to_depth(pts, rig, h, w)
        ref = np.zeros((h, w))
        P = rig.P_left
        Tr, R = rig.Tr_velo_to_cam, rig.R0_rect
        for p in pts.astype(np.float64):
            c = [sum(Tr[r, k] * p[k] for k in range(3)) + Tr[r, 3] for r in range(3)]
            c = [sum(R[r, k] * c[k] for k in range(3)) for r in range(3)]
            if c[2] <= 0:
                continue
            hom = [sum(P[r, k] * c[k] for k in range(3)) + P[r, 3] for r in range(3)]
            col = math.floor(hom[0] / hom[2] + 0.5)
            row = math.floor(hom[1] / hom[2] + 0.5)
            if 0 <= col < w and 0 <= row < h and (ref[row, col] == 0 or c[2] < ref[row, col]):
                ref[row, col] = c[2]
        np.testing.assert_allclose(got[0], ref, rtol=1e-12, atol=0)
        assert (got >= 0).all()

    def test_velo_to_cam_axes(self):
        frame = synthetic_frame(0)
        cam = velo_to_cam(np.array([[10.0, -1.0, -2.0, 0.0]]), frame.rig)
        assert cam.tolist() == [[1.0, 2.0, 10.0]]


class TestGeometry:
    def test_box_corners_layout(self):
        box = Box3D(1.0, 2.0, 10.0, 1.5, 2.0, 4.0, 0.0)
        c = box_corners(box)
        assert np.all(c[:4, 1] == 2.0) and np.all(c[4:, 1] == 0.5)
        assert c[:, 0].min() == -1.0 and c[:, 0].max() == 3.0  # l along x at yaw 0
        assert c[:, 2].min() == 9.0 and c[:, 2].max() == 11.0

    def test_projection(self):
        rig = make_rig(100.0, 20.0, 10.0, 0.5)
        uv, depth = project_to_image(np.array([[1.0, -0.5, 10.0]]), rig.P_left)
        assert uv.tolist() == [[30.0, 5.0]] and depth.tolist() == [10.0]


class TestImages:
    def test_pgm_round_trip(self):
        img = np.random.default_rng(0).integers(0, 256, (5, 7)) / 255.0
        assert np.array_equal(read_pgm(write_pgm(img)), img)

    def test_pgm_comment(self):
        buf = b"P5\n# note\n2 1\n255\n" + bytes([0, 255])
        assert read_pgm(buf).tolist() == [[0.0, 1.0]]

    def test_pgm_rejects_ascii(self):
        with pytest.raises(FormatError):
            read_pgm(b"P2\n1 1\n255\n0\n")

    def test_pfm_round_trip_and_orientation(self):
        img = np.arange(6, dtype=np.float32).reshape(2, 3)
        buf = write_pfm(img)
        assert np.frombuffer(buf[-24:-12], "<f4").tolist() == [3.0, 4.0, 5.0]  # bottom row first
        assert np.array_equal(read_pfm(buf), img)


def test_synthetic_frame_round_trip(tmp_path):
    frame = synthetic_frame(7)
    assert frame.left.shape == (96, 320) and len(frame.labels) >= 1
    write_frame(tmp_path, frame)
    back = load_frame(tmp_path, frame.frame_id)
    assert np.array_equal(back.points, frame.points)
    assert np.array_equal(back.left, frame.left.astype(np.float32))
    assert np.array_equal(back.rig.P_left, frame.rig.P_left)
    assert len(back.labels) == len(frame.labels)


def test_load_frame_missing_calib(tmp_path):
    with pytest.raises(FileNotFoundError, match="calib"):
        load_frame(tmp_path, "000000")
