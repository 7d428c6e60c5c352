"""Trajectory accuracy metrics: aligned ATE and segmentwise relative drift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, Rotation
from .types import Trajectory

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class InsufficientOverlapError(Exception):
    """Fewer than three timestamp pairs could be associated."""


class DegenerateGeometryError(Exception):
    """Paired positions are collinear; rigid alignment is rank deficient."""


class InsufficientLengthError(Exception):
    """Trajectory shorter than the smallest evaluation segment."""


def associate(est: Trajectory, ref: Trajectory, max_dt: float = 0.02):
    """Greedy nearest-timestamp pairing, each pose used at most once.

    Returns (est_indices, ref_indices) sorted by time.
    """
    if max_dt <= 0.0:
        raise ValueError("max_dt must be positive")
    candidates = []
    for i, t in enumerate(est.times):
        j = int(np.searchsorted(ref.times, t))
        for jj in (j - 1, j):
            if 0 <= jj < len(ref):
                dt = abs(float(ref.times[jj] - t))
                if dt <= max_dt:
                    candidates.append((dt, i, jj))
    candidates.sort()
    used_est = set()
    used_ref = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_est or j in used_ref:
            continue
        used_est.add(i)
        used_ref.add(j)
        pairs.append((i, j))
    if len(pairs) < 3:
        raise InsufficientOverlapError(
            f"only {len(pairs)} timestamp pairs within {max_dt}s (need at least 3)"
        )
    pairs.sort()
    est_idx = np.array([p[0] for p in pairs], dtype=np.int64)
    ref_idx = np.array([p[1] for p in pairs], dtype=np.int64)
    return est_idx, ref_idx


def align_6dof(est_positions: np.ndarray, ref_positions: np.ndarray) -> Pose:
    """Closed-form least-squares rigid transform T with ref ~= T * est."""
    est_positions = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    ref_positions = np.asarray(ref_positions, dtype=float).reshape(-1, 3)
    if len(est_positions) < 3:
        raise DegenerateGeometryError("need at least 3 position pairs")
    mu_est = est_positions.mean(axis=0)
    mu_ref = ref_positions.mean(axis=0)
    cross = (ref_positions - mu_ref).T @ (est_positions - mu_est)
    u, s, vt = np.linalg.svd(cross)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("position pairs are collinear")
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return Pose(Rotation.from_matrix(rot), mu_ref - rot @ mu_est)


@dataclass(frozen=True)
class AteReport:
    rmse: float
    max: float
    residuals: np.ndarray
    times: np.ndarray
    alignment: Pose

    def to_text(self) -> str:
        lines = [
            "metric: ate",
            f"rmse_m: {self.rmse!r}",
            f"max_m: {self.max!r}",
            f"pairs: {len(self.residuals)}",
            "alignment_translation: " + " ".join(repr(v) for v in self.alignment.translation),
            "alignment_quaternion: " + " ".join(repr(v) for v in self.alignment.rotation.as_quat()),
            "residuals:",
        ]
        lines += [f"{t!r} {r!r}" for t, r in zip(self.times, self.residuals)]
        return "\n".join(lines) + "\n"


def ate(est: Trajectory, ref: Trajectory, max_dt: float = 0.02) -> AteReport:
    """Translation RMSE and max after optimal 6-DoF alignment of est onto ref."""
    est_idx, ref_idx = associate(est, ref, max_dt)
    transform = align_6dof(est.positions[est_idx], ref.positions[ref_idx])
    aligned = est.positions[est_idx] @ transform.rotation.as_matrix().T + transform.translation
    residuals = np.linalg.norm(ref.positions[ref_idx] - aligned, axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(residuals**2))),
        max=float(residuals.max()),
        residuals=residuals,
        times=ref.times[ref_idx].copy(),
        alignment=transform,
    )


@dataclass(frozen=True)
class RelErrorReport:
    per_length: dict[float, float]
    average: float
    segment_count: int

    def to_text(self) -> str:
        lines = [
            "metric: kitti_rel",
            f"average_percent: {self.average!r}",
            f"segments: {self.segment_count}",
            "per_length_percent:",
        ]
        lines += [f"{int(length)}: {err!r}" for length, err in sorted(self.per_length.items())]
        return "\n".join(lines) + "\n"


def kitti_rel_error(
    est: Trajectory,
    ref: Trajectory,
    max_dt: float = 0.02,
    lengths=SEGMENT_LENGTHS,
    start_step: int = 1,
) -> RelErrorReport:
    """Relative translation drift over 100..800 m segments, in percent.

    Segments are measured by path length along the reference; the error of a
    segment is the translation magnitude of (ref segment)^-1 (est segment)
    divided by the segment length.  start_step thins the segment start poses.
    """
    est_idx, ref_idx = associate(est, ref, max_dt)
    ref_pos = ref.positions[ref_idx]
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ref_pos, axis=0), axis=1))])
    if dist[-1] < min(lengths):
        raise InsufficientLengthError(
            f"trajectory covers {dist[-1]:.1f} m, below the {min(lengths):.0f} m minimum segment"
        )
    est_poses = [est.pose(int(i)) for i in est_idx]
    ref_poses = [ref.pose(int(j)) for j in ref_idx]

    per_length_errors: dict[float, list[float]] = {length: [] for length in lengths}
    for start in range(0, len(ref_idx), start_step):
        for length in lengths:
            end = int(np.searchsorted(dist, dist[start] + length, side="right"))
            if end >= len(ref_idx):
                continue
            delta_ref = ref_poses[start].inverse() @ ref_poses[end]
            delta_est = est_poses[start].inverse() @ est_poses[end]
            err = delta_ref.inverse() @ delta_est
            per_length_errors[length].append(
                float(np.linalg.norm(err.translation)) / length * 100.0
            )
    all_errors = [e for errs in per_length_errors.values() for e in errs]
    if not all_errors:
        raise InsufficientLengthError("no complete segments of any evaluation length")
    per_length = {
        length: float(np.mean(errs)) for length, errs in per_length_errors.items() if errs
    }
    return RelErrorReport(
        per_length=per_length,
        average=float(np.mean(all_errors)),
        segment_count=len(all_errors),
    )


# ---------------------------------------------------------------------------
# Report parsing (round-trips the to_text formats)
# ---------------------------------------------------------------------------

def parse_ate_report(text: str) -> AteReport:
    head, _, tail = text.partition("residuals:")
    fields = dict(
        line.split(":", 1) for line in head.strip().splitlines() if ":" in line
    )
    rows = [line.split() for line in tail.strip().splitlines() if line.strip()]
    times = np.array([float(r[0]) for r in rows])
    residuals = np.array([float(r[1]) for r in rows])
    translation = np.array([float(v) for v in fields["alignment_translation"].split()])
    quat = np.array([float(v) for v in fields["alignment_quaternion"].split()])
    return AteReport(
        rmse=float(fields["rmse_m"]),
        max=float(fields["max_m"]),
        residuals=residuals,
        times=times,
        alignment=Pose(Rotation.from_quat(quat), translation),
    )


def parse_rel_error_report(text: str) -> RelErrorReport:
    head, _, tail = text.partition("per_length_percent:")
    fields = dict(
        line.split(":", 1) for line in head.strip().splitlines() if ":" in line
    )
    per_length = {}
    for line in tail.strip().splitlines():
        if ":" not in line:
            continue
        key, value = line.split(":", 1)
        per_length[float(key)] = float(value)
    return RelErrorReport(
        per_length=per_length,
        average=float(fields["average_percent"]),
        segment_count=int(fields["segments"]),
    )
