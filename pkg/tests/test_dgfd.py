import math
from collections import Counter

import numpy as np
import pytest

import reference
from stereogeo.dgfd import (
    LidarVoxelSpec,
    build_fg_mask,
    build_sparse_mask,
    distill_loss,
    make_adapters,
    make_teacher_weights,
    teacher_bev,
    teacher_features,
    voxelize,
)
from stereogeo.egfg import ConfigError, VoxelSpec
from stereogeo.gridcore import DimensionError, conv2d, identity_kernel
from stereogeo.kitti_io import Box3D


def random_points(rng, n, spec, pad=2.0):
    lo, hi = spec.mins - pad, spec.maxs + pad
    return np.column_stack([rng.uniform(lo, hi, (n, 3)), rng.random(n)])


class TestLidarSpec:
    def test_default_dims(self):
        lidar = LidarVoxelSpec()
        assert lidar.dims == (1200, 40, 1152)
        assert lidar.pooling_factors(VoxelSpec()) == (8, 8)

    def test_region_mismatch(self):
        other = VoxelSpec((-20.0, 20.0), (-1.0, 3.0), (2.0, 59.6), (0.4, 0.8, 0.4))
        with pytest.raises(ConfigError):
            LidarVoxelSpec().pooling_factors(other)


class TestVoxelize:
    def test_single_point(self):
        g = voxelize(np.array([[0.0, 1.0, 30.8, 0.5]]), LidarVoxelSpec())
        assert len(g.counts) == 1 and g.counts[0] == 1 and g.dropped == 0
        assert g.means[0].tolist() == [0.0, 1.0, 30.8, 0.5]

    def test_upper_bound_dropped(self):
        g = voxelize(np.array([[30.0, 1.0, 10.0]]), LidarVoxelSpec())
        assert len(g.counts) == 0 and g.dropped == 1

    def test_lower_bound_kept(self):
        g = voxelize(np.array([[-30.0, -1.0, 2.0]]), LidarVoxelSpec())
        assert g.coords.tolist() == [[0, 0, 0]]

    def test_counts_match_brute_force(self, tiny_spec):
        lidar = LidarVoxelSpec.matching(tiny_spec, (0.1, 0.2, 0.1))
        rng = np.random.default_rng(0)
        pts = random_points(rng, 10_000, lidar)
        g = voxelize(pts, lidar)
        want = Counter()
        for p in pts:
            idx = []
            for a in range(3):
                lo, hi = (lidar.x_range, lidar.y_range, lidar.z_range)[a]
                if not lo <= p[a] < hi:
                    break
                idx.append(math.floor((p[a] - lo) / lidar.voxel[a]))
            else:
                want[tuple(idx)] += 1
        got = {tuple(c): int(n) for c, n in zip(g.coords, g.counts)}
        assert got == dict(want)
        assert g.total_points == len(pts)

    def test_means(self):
        spec = LidarVoxelSpec.matching(VoxelSpec(), (0.05, 0.1, 0.05))
        pts = np.array([[0.01, 0.01, 10.01, 0.2], [0.02, 0.03, 10.02, 0.4]])
        g = voxelize(pts, spec)
        np.testing.assert_allclose(g.means[0], [0.015, 0.02, 10.015, 0.3], rtol=1e-12)

    def test_empty(self):
        g = voxelize(np.zeros((0, 4)), LidarVoxelSpec())
        assert g.total_points == 0 and len(g.coords) == 0


def _reference_teacher(pts, lidar, stereo, weights):
    """Dense loop implementation of the pooled teacher BEV and its fusion."""
    Xl, Yl, Zl = lidar.dims
    occ = np.zeros((Xl, Yl, Zl))
    cnt = np.zeros((Xl, Yl, Zl))
    for p in pts:
        idx = []
        for a in range(3):
            lo, hi = (lidar.x_range, lidar.y_range, lidar.z_range)[a]
            if not lo <= p[a] < hi:
                break
            idx.append(math.floor((p[a] - lo) / lidar.voxel[a]))
        else:
            occ[tuple(idx)] = 1.0
            cnt[tuple(idx)] += 1.0
    X, _, Z = stereo.dims
    fx, fz = Xl // X, Zl // Z
    stubbed = []
    for i in range(3):
        p = 2**i
        yp = Yl // p
        bev = np.zeros((2 * yp, X, Z))
        for f, vol in enumerate((occ, cnt)):
            for y in range(yp):
                for x in range(X):
                    for z in range(Z):
                        block = vol[x * fx : (x + 1) * fx, y * p : (y + 1) * p, z * fz : (z + 1) * fz]
                        # 3-D mean over p^3 cells, then BEV mean over the (fx/p, fz/p) window
                        bev[f * yp + y, x, z] = block.sum() / p**3 / ((fx // p) * (fz // p))
        k = weights.stub[i]
        stubbed.append(reference.conv2d(bev, k.weights, k.bias))
    return reference.fuse_chain(stubbed, [(k.weights, k.bias) for k in weights.fuse])


class TestTeacher:
    @pytest.fixture
    def setup(self, tiny_spec):
        lidar = LidarVoxelSpec.matching(tiny_spec, (0.1, 0.2, 0.1))
        weights = make_teacher_weights(lidar, tiny_spec, channels=2, bev_channels=4, seed=5)
        return lidar, tiny_spec, weights

    def test_empty_cloud(self, setup):
        lidar, stereo, w = setup
        feats = teacher_features(voxelize(np.zeros((0, 4)), lidar), lidar, stereo, w)
        assert all(f.shape == (4, 10, 12) and not f.any() for f in feats)

    def test_pooled_mass(self, setup):
        lidar, stereo, _ = setup
        pts = random_points(np.random.default_rng(1), 2000, lidar, pad=0.0)
        g = voxelize(pts, lidar)
        bevs = teacher_bev(g, lidar, stereo)
        fx, fz = lidar.pooling_factors(stereo)
        for i, b in enumerate(bevs):
            p = 2**i
            yp = lidar.dims[1] // p
            scale = p**3 * (fx // p) * (fz // p)
            assert b[yp:].sum() * scale == g.counts.sum()
            assert b[:yp].sum() * scale == len(g.counts)

    def test_bit_identical_to_reference(self, setup):
        lidar, stereo, w = setup
        pts = random_points(np.random.default_rng(2), 3000, lidar, pad=0.5)
        got = teacher_features(voxelize(pts, lidar), lidar, stereo, w)
        want = _reference_teacher(pts, lidar, stereo, w)
        for a, b in zip(got, want):
            assert np.array_equal(a, b)

    def test_grid_mismatch(self, setup, tiny_spec):
        lidar, stereo, w = setup
        g = voxelize(np.zeros((0, 4)), LidarVoxelSpec.matching(tiny_spec, (0.2, 0.2, 0.2)))
        with pytest.raises(ConfigError):
            teacher_features(g, lidar, stereo, w)


class TestMasks:
    def test_grid_aligned_square(self):
        m = build_fg_mask([Box3D(0.0, 1.5, 20.0, 1.5, 4.0, 4.0, 0.0)], VoxelSpec())
        assert m.sum() == 100
        assert set(np.unique(m)) <= {0.0, 1.0}

    def test_empty_and_out_of_range(self):
        spec = VoxelSpec()
        assert not build_fg_mask([], spec).any()
        assert not build_fg_mask([Box3D(80.0, 1.5, 20.0, 1.5, 2.0, 4.0, 0.3)], spec).any()

    def test_matches_point_in_rectangle_loop(self, tiny_spec):
        rng = np.random.default_rng(3)
        boxes = [Box3D(float(rng.uniform(-3, 3)), 1.5, float(rng.uniform(4, 10)), 1.5, 1.7, 3.9, float(rng.uniform(-3, 3))) for _ in range(3)]
        m = build_fg_mask(boxes, tiny_spec)
        X, _, Z = tiny_spec.dims
        for xi in range(X):
            for zi in range(Z):
                px = tiny_spec.x_range[0] + (xi + 0.5) * tiny_spec.voxel[0]
                pz = tiny_spec.z_range[0] + (zi + 0.5) * tiny_spec.voxel[2]
                want = any(reference.point_in_footprint(px, pz, b.as_array()) for b in boxes)
                assert m[xi, zi] == float(want)

    def test_yaw_periodicity_and_quarter_turn(self):
        spec = VoxelSpec()
        a = build_fg_mask([Box3D(0.0, 1.5, 20.0, 1.5, 1.6, 2.4, 0.7)], spec)
        b = build_fg_mask([Box3D(0.0, 1.5, 20.0, 1.5, 1.6, 2.4, 0.7 + 2 * math.pi)], spec)
        assert np.array_equal(a, b)
        turned = build_fg_mask([Box3D(0.0, 1.5, 20.0, 1.5, 1.6, 2.4, math.pi / 2)], spec)
        swapped = build_fg_mask([Box3D(0.0, 1.5, 20.0, 1.5, 2.4, 1.6, 0.0)], spec)
        assert np.array_equal(turned, swapped) and turned.sum() == 4 * 6

    def test_sparse_single_point(self):
        spec = VoxelSpec()
        m = build_sparse_mask(np.array([[0.1, 0.0, 10.1]]), spec)
        assert m.sum() == 1 and m[75, 20] == 1

    def test_sparse_vertical_range(self):
        assert not build_sparse_mask(np.array([[0.1, 5.0, 10.1]]), VoxelSpec()).any()

    def test_sparse_matches_brute_force(self, tiny_spec):
        pts = random_points(np.random.default_rng(4), 500, tiny_spec)
        m = build_sparse_mask(pts, tiny_spec)
        want = np.zeros_like(m)
        for p in pts:
            ok = all(lo <= p[a] < hi for a, (lo, hi) in enumerate((tiny_spec.x_range, tiny_spec.y_range, tiny_spec.z_range)))
            if ok:
                xi = math.floor((p[0] - tiny_spec.x_range[0]) / tiny_spec.voxel[0])
                zi = math.floor((p[2] - tiny_spec.z_range[0]) / tiny_spec.voxel[2])
                want[xi, zi] = 1.0
        assert np.array_equal(m, want)


class TestDistillLoss:
    @pytest.fixture
    def fixture(self):
        rng = np.random.default_rng(5)
        student = [rng.normal(size=(4, 6, 7)) for _ in range(3)]
        teacher = [rng.normal(size=(4, 6, 7)) for _ in range(3)]
        m_fg = (rng.random((6, 7)) < 0.5).astype(float)
        m_sp = (rng.random((6, 7)) < 0.7).astype(float)
        return student, teacher, make_adapters(4, seed=1), m_fg, m_sp

    def test_equal_features_zero(self, fixture):
        s, _, _, m_fg, m_sp = fixture
        res = distill_loss(s, [x.copy() for x in s], (identity_kernel(4),) * 3, m_fg, m_sp)
        assert res.total == 0.0 and res.per_scale == (0.0, 0.0, 0.0)

    def test_planted_difference(self):
        s = [np.zeros((3, 4, 4)) for _ in range(3)]
        t = [x.copy() for x in s]
        t[2][1, 2, 3] = 2.0
        t[0][0, 0, 0] = 7.0  # outside the mask
        mask = np.zeros((4, 4))
        mask[2, 3] = 1.0
        res = distill_loss(s, t, (identity_kernel(3),) * 3, mask, np.ones((4, 4)))
        assert res.total == 4.0 and res.per_scale == (0.0, 0.0, 4.0) and res.active_cells == 1

    def test_alpha_scaling(self, fixture):
        s, t, g, m_fg, m_sp = fixture
        base = distill_loss(s, t, g, m_fg, m_sp).total
        adapted = [conv2d(x, k) for x, k in zip(s, g)]
        t3 = [a - 3.0 * (a - b) for a, b in zip(adapted, t)]
        assert distill_loss(s, t3, g, m_fg, m_sp).total / base == pytest.approx(9.0, rel=1e-6)

    def test_unmasked_perturbation_invariant(self, fixture):
        s, t, g, m_fg, m_sp = fixture
        base = distill_loss(s, t, g, m_fg, m_sp)
        off = (m_fg * m_sp) == 0
        rng = np.random.default_rng(9)
        t2 = [x.copy() for x in t]
        for x in t2:
            x[:, off] += rng.normal(size=x[:, off].shape) * 100
        assert distill_loss(s, t2, g, m_fg, m_sp).total == base.total

    def test_normaliser(self, fixture):
        s, t, g, m_fg, m_sp = fixture
        res = distill_loss(s, t, g, m_fg, m_sp)
        n = int((m_fg * m_sp).sum())
        assert res.active_cells == n
        manual = 0.0
        for x, y, k in zip(s, t, g):
            d = (conv2d(x, k) - y) * (m_fg * m_sp)
            manual += float((d * d).sum()) / n
        assert res.total == pytest.approx(manual, rel=1e-12)
        assert distill_loss(s, t, g, m_fg, m_sp, per_scale_n=True).total == res.total

    def test_empty_mask(self, fixture):
        s, t, g, _, _ = fixture
        res = distill_loss(s, t, g, np.zeros((6, 7)), np.ones((6, 7)))
        assert res.total == 0.0 and res.active_cells == 0

    def test_non_negative(self, fixture):
        s, t, g, m_fg, m_sp = fixture
        assert distill_loss(s, t, g, m_fg, m_sp).total > 0

    def test_shape_mismatch(self, fixture):
        s, t, g, m_fg, m_sp = fixture
        with pytest.raises(DimensionError):
            distill_loss(s, t, g, m_fg[:5], m_sp[:5])
        with pytest.raises(DimensionError):
            distill_loss(s[:2], t, g, m_fg, m_sp)

    def test_report_lines(self):
        s = [np.zeros((1, 2, 2))] * 3
        res = distill_loss(s, s, (identity_kernel(1),) * 3, np.ones((2, 2)), np.ones((2, 2)))
        assert res.report().splitlines()[0] == "scale=1 loss=0"
