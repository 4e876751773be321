"""Stereo 3D detection geometry with fixture weights.

Modules:

* ``gridcore``   dense tensor primitives, seeded kernels, ESGT dumps
* ``kitti_io``   KITTI calib / label / velodyne formats, camera rig, frames
* ``egfg``       stereo correlation, stereo volumes, frustum-to-voxel, BEV fusion
* ``dgfd``       LiDAR voxelization, teacher features, masks, distillation loss
* ``detect``     anchors, residual codec, rotated IoU, losses, NMS
* ``evaluation`` KITTI-style matching and average precision
* ``cli``        ``stereogeo`` command-line tool
"""

from .gridcore import ConvKernel, DimensionError, FormatError, seeded_kernel
from .kitti_io import Box3D, CameraRig, Frame, Label, ParseError
from .egfg import ConfigError, PyramidConfig, VoxelSpec
from .dgfd import LidarVoxelSpec

__version__ = "0.1.0"

__all__ = [
    "Box3D",
    "CameraRig",
    "ConfigError",
    "ConvKernel",
    "DimensionError",
    "FormatError",
    "Frame",
    "Label",
    "LidarVoxelSpec",
    "ParseError",
    "PyramidConfig",
    "VoxelSpec",
    "seeded_kernel",
]
