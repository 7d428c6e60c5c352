"""Per-scan motion compensation driven by integrated IMU poses.

Each laser point gets a timestamp proportional to its azimuth within the
revolution; the pose buffer supplies the sensor pose at that instant and every
point is re-expressed in the frame of the scan's start point with the
deviation from uniform motion removed.
"""

from __future__ import annotations

import numpy as np

from .geometry import (
    Pose,
    Rotation,
    quat_conjugate,
    quat_multiply,
    quat_rotate,
    quat_to_rotvec,
    rotvec_to_quat,
)
from .types import TWO_PI, LaserScan


class BracketingError(Exception):
    """Query time not bracketed by buffered samples."""


class ImuPoseBuffer:
    """Append-only track of integrated IMU pose and velocity in the world frame.

    One producer (the odometry filter) appends; consumers read snapshots, so no
    synchronization is needed beyond the append-only discipline.
    """

    def __init__(self):
        self._times: list[float] = []
        self._positions: list[np.ndarray] = []
        self._velocities: list[np.ndarray] = []
        self._quats: list[np.ndarray] = []
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self._times)

    def append(self, t: float, pose: Pose, velocity: np.ndarray) -> None:
        if self._times and t <= self._times[-1]:
            raise ValueError("buffer timestamps must be strictly increasing")
        self._times.append(float(t))
        self._positions.append(np.asarray(pose.translation, dtype=float))
        self._velocities.append(np.asarray(velocity, dtype=float))
        self._quats.append(pose.rotation.as_quat())
        self._cache = None

    def arrays(self):
        if self._cache is None:
            self._cache = (
                np.asarray(self._times),
                np.asarray(self._positions).reshape(-1, 3),
                np.asarray(self._velocities).reshape(-1, 3),
                np.asarray(self._quats).reshape(-1, 4),
            )
        return self._cache

    def covers(self, t0: float, t1: float) -> bool:
        if len(self._times) < 2:
            return False
        return self._times[0] <= t0 and t1 <= self._times[-1]

    def _bracket(self, ts: np.ndarray) -> np.ndarray:
        times = self.arrays()[0]
        if len(times) < 2:
            raise BracketingError("buffer holds fewer than two samples")
        lo, hi = times[0], times[-1]
        if np.any(ts < lo - 1e-12):
            raise BracketingError(f"query {ts.min():.6f}s precedes buffer start {lo:.6f}s")
        if np.any(ts > hi + 1e-12):
            raise BracketingError(f"query {ts.max():.6f}s exceeds buffer end {hi:.6f}s")
        return np.clip(np.searchsorted(times, ts, side="right") - 1, 0, len(times) - 2)

    def interpolate_arrays(self, ts: np.ndarray, orientation_interp: str = "slerp"):
        """Pose and velocity at each query time: (positions, quats, velocities).

        Position and velocity are interpolated linearly between the bracketing
        samples.  Orientation uses constant-angular-velocity interpolation by
        default; "linear" interpolates the global rotation-vector components
        instead, which matches the componentwise rule but can wrap near pi.
        """
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        times, positions, velocities, quats = self.arrays()
        idx = self._bracket(ts)
        t_k, t_k1 = times[idx], times[idx + 1]
        ratio = ((ts - t_k) / (t_k1 - t_k))[:, None]
        pos = positions[idx] * (1.0 - ratio) + positions[idx + 1] * ratio
        vel = velocities[idx] * (1.0 - ratio) + velocities[idx + 1] * ratio

        out_q = np.empty((len(ts), 4))
        if orientation_interp == "linear":
            rv = quat_to_rotvec(quats)
            out_q = rotvec_to_quat(rv[idx] * (1.0 - ratio) + rv[idx + 1] * ratio)
        elif orientation_interp == "slerp":
            for seg in np.unique(idx):
                sel = idx == seg
                rel = quat_to_rotvec(quat_multiply(quat_conjugate(quats[seg]), quats[seg + 1]))
                step = rotvec_to_quat(ratio[sel] * rel)
                out_q[sel] = quat_multiply(quats[seg], step)
        else:
            raise ValueError(f"unknown orientation_interp '{orientation_interp}'")
        return pos, out_q, vel

    def interpolate(self, t: float, orientation_interp: str = "slerp"):
        pos, quat, vel = self.interpolate_arrays(np.array([t]), orientation_interp)
        return Pose(Rotation.from_quat(quat[0]), pos[0]), vel[0]


def interpolate_pose(buffer: ImuPoseBuffer, t: float, orientation_interp: str = "slerp"):
    """Pose and velocity at time t from the bracketing buffer samples."""
    return buffer.interpolate(t, orientation_interp)


def stamp_points(scan: LaserScan) -> LaserScan:
    """Assign per-point timestamps proportional to unwrapped azimuth.

    t = t_start + scan_period * theta / theta_end, with theta the azimuth of
    the point relative to the scan's first point.  Scans whose azimuths are
    non-finite, out of order, or spanning more than one revolution are
    rejected.
    """
    if scan.theta_end <= 0.0:
        raise ValueError("scan theta_end must be positive")
    az = scan.azimuths
    if len(scan) == 0:
        return scan
    if not np.all(np.isfinite(az)):
        raise ValueError("scan contains non-finite azimuths")
    rel = az - az[0]
    rel = np.where(rel < -1e-12, rel + TWO_PI, rel)
    if np.any(np.diff(rel) < -1e-9):
        raise ValueError("azimuths not monotone after unwrapping (multi-revolution scan?)")
    timestamps = scan.t_start + scan.scan_period * rel / scan.theta_end
    return LaserScan(
        positions=scan.positions,
        intensities=scan.intensities,
        azimuths=scan.azimuths,
        timestamps=timestamps,
        t_start=scan.t_start,
        scan_period=scan.scan_period,
        theta_end=scan.theta_end,
        labels=scan.labels,
    )


def deskew(scan: LaserScan, buffer: ImuPoseBuffer, orientation_interp: str = "slerp") -> LaserScan:
    """Remove intra-scan motion distortion; output is in the start-point frame.

    For each point the buffered pose at its timestamp gives the deviation from
    uniform motion, which is rotated into the start frame and applied on top of
    the uniform-motion reprojection; the net effect is the exact rigid
    reprojection of every point into the frame of the scan's first point.
    Point count, ordering, intensities and labels are preserved.
    """
    if len(scan) == 0:
        return scan
    pos_t, quat_t, _ = buffer.interpolate_arrays(scan.timestamps, orientation_interp)
    start_pose, start_vel = buffer.interpolate(scan.t_start, orientation_interp)
    q_s_conj = quat_conjugate(start_pose.rotation.as_quat())

    dt = (scan.timestamps - scan.t_start)[:, None]
    deviation_w = pos_t - (start_pose.translation + start_vel * dt)

    rel_q = quat_multiply(q_s_conj, quat_t)
    rotated = quat_rotate(rel_q, scan.positions)
    uniform = quat_rotate(q_s_conj, start_vel * dt)
    deviation = quat_rotate(q_s_conj, deviation_w)
    return scan.with_positions(rotated + uniform + deviation)
