"""Dataset file formats.

Clouds are headerless little-endian float32 [x, y, z, intensity] records;
labels are one byte per point in cloud order; IMU logs and trajectories are
plain text.  Every writer/reader pair round-trips exactly.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .types import ImuTrack, Trajectory

_RECORD_BYTES = 16  # 4 float32 per point


class FormatError(Exception):
    """Malformed input file; message carries the byte offset or line number."""


def write_scan_bin(path, positions: np.ndarray, intensities: np.ndarray) -> None:
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    intensities = np.asarray(intensities, dtype=np.float32).reshape(-1)
    if len(positions) != len(intensities):
        raise ValueError("positions and intensities length mismatch")
    data = np.concatenate([positions, intensities[:, None]], axis=1)
    data.astype("<f4").tofile(path)


def read_scan_bin(path):
    """Returns (positions (n, 3), intensities (n,)) as float64."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % _RECORD_BYTES != 0:
        offset = raw.size - raw.size % _RECORD_BYTES
        raise FormatError(
            f"{path}: truncated record at byte offset {offset} (file size {raw.size})"
        )
    data = raw.view("<f4").reshape(-1, 4)
    return data[:, :3].astype(float), data[:, 3].astype(float)


def write_labels(path, labels: np.ndarray) -> None:
    np.asarray(labels, dtype=np.uint8).tofile(path)


def read_labels(path, expected_count: int | None = None) -> np.ndarray:
    labels = np.fromfile(path, dtype=np.uint8)
    if expected_count is not None and len(labels) != expected_count:
        raise FormatError(
            f"{path}: {len(labels)} labels for {expected_count} points"
        )
    return labels


def write_imu_txt(path, track: ImuTrack) -> None:
    with open(path, "w") as f:
        f.write("# t ax ay az wx wy wz\n")
        for i in range(len(track)):
            row = [track.times[i], *track.accel[i], *track.gyro[i]]
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_imu_txt(path) -> ImuTrack:
    times, accel, gyro = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            times.append(values[0])
            accel.append(values[1:4])
            gyro.append(values[4:7])
    if not times:
        raise FormatError(f"{path}: no IMU samples")
    return ImuTrack(
        times=np.asarray(times), accel=np.asarray(accel), gyro=np.asarray(gyro)
    )


def write_trajectory_tum(path, traj: Trajectory) -> None:
    """TUM format: t x y z qx qy qz qw, one pose per line."""
    with open(path, "w") as f:
        for i in range(len(traj)):
            row = [traj.times[i], *traj.positions[i], *traj.quaternions[i]]
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_trajectory_tum(path) -> Trajectory:
    times, positions, quats = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            times.append(values[0])
            positions.append(values[1:4])
            quats.append(values[4:8])
    if not times:
        raise FormatError(f"{path}: no poses")
    return Trajectory(
        times=np.asarray(times),
        positions=np.asarray(positions),
        quaternions=np.asarray(quats),
    )


def atomic_write_text(path, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def atomic_write(path, writer) -> None:
    """Run writer(tmp_path) then atomically rename onto path."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)
