"""Block-map lidar-inertial localization toolkit."""

from .geometry import PoseSE3, TwistSe3, pose_interpolate, se3_exp, se3_log

__version__ = "0.1.0"

__all__ = ["PoseSE3", "TwistSe3", "pose_interpolate", "se3_exp", "se3_log", "__version__"]
