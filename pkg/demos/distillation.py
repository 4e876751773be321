"""Teacher features from LiDAR, the two BEV masks, and the masked feature loss."""

import numpy as np

from stereogeo import dgfd
from stereogeo.egfg import PyramidConfig, VoxelSpec, make_weights, run_egfg
from stereogeo.kitti_io import synthetic_frame, velo_to_cam

frame = synthetic_frame(5)
cfg, spec = PyramidConfig(), VoxelSpec()
lidar = dgfd.LidarVoxelSpec.matching(spec)
print("lidar grid", lidar.dims, "pools onto stereo grid by", lidar.pooling_factors(spec))

points = velo_to_cam(frame.points, frame.rig)
grid = dgfd.voxelize(points, lidar)
print("points", len(points), "occupied voxels", len(grid.counts), "dropped", grid.dropped)

weights = dgfd.make_teacher_weights(lidar, spec, cfg.channels, cfg.bev_channels, seed=0)
teacher = dgfd.teacher_features(grid, lidar, spec, weights)
student = run_egfg(frame.left, frame.right, frame.rig, cfg, spec, make_weights(cfg, spec)).f_gf

m_fg = dgfd.build_fg_mask(frame.gt_boxes, spec)
m_sp = dgfd.build_sparse_mask(points, spec)
print("foreground cells", int(m_fg.sum()), "lidar cells", int(m_sp.sum()), "joint", int((m_fg * m_sp).sum()))

result = dgfd.distill_loss(student, teacher, dgfd.make_adapters(cfg.bev_channels), m_fg, m_sp)
print(result.report())

# a teacher that matches the adapted student everywhere gives zero
from stereogeo.gridcore import conv2d  # noqa: E402

adapters = dgfd.make_adapters(cfg.bev_channels)
mirror = [conv2d(s, g) for s, g in zip(student, adapters)]
print("mirror teacher loss", dgfd.distill_loss(student, mirror, adapters, m_fg, m_sp).total)
np.testing.assert_equal(dgfd.distill_loss(student, mirror, adapters, m_fg, m_sp).total, 0.0)
