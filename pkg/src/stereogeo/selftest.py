"""Quick consistency checks behind ``stereogeo selftest``."""

from __future__ import annotations

import math

import numpy as np

from . import detect, dgfd
from .egfg import correlate
from .gridcore import identity_kernel, lcg_uniform, seeded_kernel


def _correlation_matches_loop():
    rng = np.random.default_rng(1)
    fl, fr = rng.normal(size=(2, 3, 4, 10))
    cv = correlate(fl, fr, 4)
    c, h, w = fl.shape
    for d in range(4):
        for y in range(h):
            for x in range(w):
                ref = 0.0
                if x - d >= 0 and x + d < w:
                    ref = sum(fl[k, y, x - d] * fr[k, y, x + d] for k in range(c)) / c
                if abs(cv[d, y, x] - ref) > 1e-12:
                    return False
    return True


def _lcg_matches_sequential():
    state, ref = 12345, []
    for _ in range(5):
        state = (6364136223846793005 * state + 1442695040888963407) % 2**64
        ref.append((state >> 11) / 2.0**53)
    return np.array_equal(lcg_uniform(12345, 5), np.array(ref))


def _kernel_determinism():
    return np.array_equal(seeded_kernel(3, 2, 2).weights, seeded_kernel(3, 2, 2).weights)


def _iou_cases():
    a = np.array([0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 0.0])
    b = a.copy()
    b[0] = 1.0
    far = a.copy()
    far[0] = 100.0
    return (
        abs(detect.rotated_iou_bev(a, a) - 1.0) < 1e-9
        and detect.rotated_iou_bev(a, far) == 0.0
        and abs(detect.rotated_iou_bev(a, b) - 1.0 / 3.0) < 1e-9
    )


def _codec_round_trip():
    rng = np.random.default_rng(2)
    gt = np.column_stack([rng.normal(size=(50, 3)), rng.uniform(0.5, 5, (50, 3)), rng.uniform(-math.pi, math.pi, 50)])
    an = np.column_stack([rng.normal(size=(50, 3)), rng.uniform(0.5, 5, (50, 3)), rng.uniform(-math.pi, math.pi, 50)])
    return np.allclose(detect.decode(detect.encode(gt, an), an), gt, atol=1e-9, rtol=0)


def _distill_planted():
    f = [np.zeros((1, 3, 3)) for _ in range(3)]
    t = [x.copy() for x in f]
    t[1][0, 1, 1] = 2.0
    mask = np.zeros((3, 3))
    mask[1, 1] = 1.0
    res = dgfd.distill_loss(f, t, (identity_kernel(1),) * 3, mask, mask)
    return res.total == 4.0


CHECKS = [
    ("correlation", _correlation_matches_loop),
    ("lcg", _lcg_matches_sequential),
    ("kernel_determinism", _kernel_determinism),
    ("rotated_iou", _iou_cases),
    ("box_codec", _codec_round_trip),
    ("distill_loss", _distill_planted),
]


def run_selftest(out) -> int:
    failed = 0
    for name, fn in CHECKS:
        ok = bool(fn())
        failed += not ok
        print(f"check={name} result={'pass' if ok else 'FAIL'}", file=out)
    print(f"checks={len(CHECKS)} failed={failed}", file=out)
    return 1 if failed else 0
