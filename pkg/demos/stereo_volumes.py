"""Walk a synthetic stereo pair through correlation, stereo volumes and BEV fusion."""

import numpy as np

from stereogeo.egfg import PyramidConfig, VoxelSpec, correlate, make_weights, run_egfg
from stereogeo.kitti_io import synthetic_frame

frame = synthetic_frame(0)  # rendered pair with calibration, labels and points
print("image", frame.left.shape, "focal", round(frame.rig.focal, 2), "baseline", frame.rig.baseline)

# correlation samples both views symmetrically, so a shift of 2d pixels peaks at index d
left = frame.left - frame.left.mean()
right = np.roll(left, 6, axis=1)
cv = correlate(left[None], right[None], 12)
print("shift 6 px -> most common argmax", np.bincount(cv[:, :, 24:-24].argmax(0).ravel()).argmax())

cfg, spec = PyramidConfig(), VoxelSpec()
print("voxel grid (X, Y, Z)", spec.dims)

out = run_egfg(frame.left, frame.right, frame.rig, cfg, spec, make_weights(cfg, spec, seed=0))
for name in ("f_l1", "f_cv1", "f_sv1", "f_sv2", "f_sv3", "f_gv1", "f_bev1", "f_gf3", "head_input"):
    t = out.tensors()[name]
    print(f"{name:<11}{str(t.shape):<22}mean={t.mean():+.3e}")

# every scale lands on the same metric grid
assert len({g.shape for g in out.f_gv}) == 1
