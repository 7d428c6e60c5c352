"""Lidar-inertial odometry and mapping toolkit.

Library surface: geometry primitives, a synthetic sensor simulator, scan
deskewing, dynamic-object rejection, an error-state Kalman filter, NDT scan
matching, frame-to-model mapping, and trajectory evaluation.  The `lio` CLI
wraps the batch pipeline.
"""

from .geometry import Pose, Rotation, compose, inverse, rotation_from_vector, transform_point
from .types import ImuSample, ImuTrack, LaserScan, TimedPoint, Trajectory

__version__ = "0.1.0"

__all__ = [
    "Pose",
    "Rotation",
    "compose",
    "inverse",
    "rotation_from_vector",
    "transform_point",
    "ImuSample",
    "ImuTrack",
    "LaserScan",
    "TimedPoint",
    "Trajectory",
    "__version__",
]
