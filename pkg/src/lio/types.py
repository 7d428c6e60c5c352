"""Sensor and trajectory containers used throughout the pipeline.

Scans, IMU tracks and trajectories are struct-of-arrays so the numeric stages
can stay vectorized; per-element views (TimedPoint, ImuSample) exist for tests
and for code that wants one record at a time.  All containers are treated as
immutable values once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Rotation

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TimedPoint:
    """Single laser return: sensor-frame position plus acquisition metadata."""

    position: np.ndarray
    intensity: float
    azimuth: float
    timestamp: float


@dataclass(frozen=True)
class LaserScan:
    """One laser revolution.

    positions   (n, 3) sensor-frame coordinates, meters
    intensities (n,)   in [0, 1]
    azimuths    (n,)   radians in [0, 2*pi), scan order
    timestamps  (n,)   absolute seconds, one per point
    labels      (n,)   optional ground-truth dynamic flags (simulator datasets)
    """

    positions: np.ndarray
    intensities: np.ndarray
    azimuths: np.ndarray
    timestamps: np.ndarray
    t_start: float
    scan_period: float
    theta_end: float
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.positions.shape[0]

    def point(self, i: int) -> TimedPoint:
        return TimedPoint(
            self.positions[i].copy(),
            float(self.intensities[i]),
            float(self.azimuths[i]),
            float(self.timestamps[i]),
        )

    def subset(self, indices: np.ndarray) -> "LaserScan":
        """New scan holding the selected points, original order preserved."""
        indices = np.asarray(indices)
        return LaserScan(
            positions=self.positions[indices],
            intensities=self.intensities[indices],
            azimuths=self.azimuths[indices],
            timestamps=self.timestamps[indices],
            t_start=self.t_start,
            scan_period=self.scan_period,
            theta_end=self.theta_end,
            labels=None if self.labels is None else self.labels[indices],
        )

    def with_positions(self, positions: np.ndarray) -> "LaserScan":
        return LaserScan(
            positions=np.asarray(positions, dtype=float),
            intensities=self.intensities,
            azimuths=self.azimuths,
            timestamps=self.timestamps,
            t_start=self.t_start,
            scan_period=self.scan_period,
            theta_end=self.theta_end,
            labels=self.labels,
        )

    def validate(self) -> None:
        n = len(self)
        if self.positions.shape != (n, 3):
            raise ValueError("positions must be (n, 3)")
        for name in ("intensities", "azimuths", "timestamps"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must be (n,)")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite point coordinates")
        if not (0.0 < self.theta_end <= TWO_PI + 1e-9):
            raise ValueError(f"theta_end {self.theta_end} outside (0, 2*pi]")
        if n and (
            self.timestamps.min() < self.t_start - 1e-9
            or self.timestamps.max() > self.t_start + self.scan_period + 1e-9
        ):
            raise ValueError("point timestamps outside scan span")


@dataclass(frozen=True)
class ImuSample:
    """Timestamped specific-force and angular-rate reading, body frame."""

    timestamp: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass(frozen=True)
class ImuTrack:
    """Time-ordered IMU stream as arrays: times (n,), accel (n, 3), gyro (n, 3)."""

    times: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.times.shape[0]

    def sample(self, i: int) -> ImuSample:
        return ImuSample(float(self.times[i]), self.accel[i].copy(), self.gyro[i].copy())

    def __iter__(self):
        for i in range(len(self)):
            yield self.sample(i)


@dataclass(frozen=True)
class Trajectory:
    """Timestamped 6-DoF poses: times (n,), positions (n, 3), quaternions (n, 4) xyzw."""

    times: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.times.shape[0]

    def pose(self, i: int) -> Pose:
        return Pose(Rotation.from_quat(self.quaternions[i]), self.positions[i])

    @staticmethod
    def from_poses(times, poses) -> "Trajectory":
        times = np.asarray(times, dtype=float)
        positions = np.stack([p.translation for p in poses])
        quaternions = np.stack([p.rotation.as_quat() for p in poses])
        return Trajectory(times, positions, quaternions)
