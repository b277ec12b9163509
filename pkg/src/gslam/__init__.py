"""Stereo visual SLAM on 3D Gaussian point maps.

Tracks camera poses against a splatted Gaussian map, maintains continuous
submaps bounded by trajectory length, closes loops by render-and-optimize
relocalization between submaps, and refines structure with anisotropic
ellipsoids after global pose-graph optimization.
"""

from gslam.geometry import CameraIntrinsics, Pose, se3_exp, se3_log
from gslam.render import GaussianMap, RenderOutput, render

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "se3_exp",
    "se3_log",
    "GaussianMap",
    "RenderOutput",
    "render",
]
