"""Batch orchestration: dataset manifests, the four-stage run loop, reports.

Per scan the loop runs deskew -> dynamic filter -> scan-to-map registration
feeding the filter update -> (every Nth scan) mapping refinement/integration.
Execution is sequential and deterministic; outputs are written to temp files
and renamed so an aborted run leaves nothing partial behind.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as lio_io
from .config import PipelineConfig
from .deskew import ImuPoseBuffer, deskew, stamp_points
from .dynamic import (
    DetectionGates,
    DetectionResult,
    GridConfig,
    HeuristicClassifier,
    OracleClassifier,
    filter_dynamic,
)
from .eskf import (
    ConditioningError,
    DegenerateMeasurementError,
    NoiseParams,
    NominalState,
    OdometryFilter,
    PoseObservation,
)
from .geometry import Pose, Rotation
from .mapping import MappingBackend, MappingConfig, downsample
from .ndt import NoOverlapError, register
from .sim import SimScenario, render_scan, synthesize_imu
from .types import TWO_PI, ImuTrack, LaserScan, Trajectory


class ManifestError(Exception):
    pass


class PipelineError(Exception):
    """A stage hard-faulted; message names the scan index and stage."""


@dataclass(frozen=True)
class ScanEntry:
    file: str
    t_start: float
    labels: str | None = None
    scan_period: float | None = None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    scans: tuple[ScanEntry, ...]
    imu: str
    ground_truth: str | None = None

    def scan_path(self, entry: ScanEntry) -> Path:
        return self.root / entry.file

    def label_path(self, entry: ScanEntry) -> Path | None:
        return None if entry.labels is None else self.root / entry.labels

    def imu_path(self) -> Path:
        return self.root / self.imu

    def ground_truth_path(self) -> Path | None:
        return None if self.ground_truth is None else self.root / self.ground_truth

    @staticmethod
    def load(dataset_dir) -> "DatasetManifest":
        root = Path(dataset_dir)
        path = root / "manifest.json"
        if not path.exists():
            raise ManifestError(f"missing manifest: {path}")
        data = json.loads(path.read_text())
        scans = tuple(
            ScanEntry(
                file=s["file"],
                t_start=float(s["t_start"]),
                labels=s.get("labels"),
                scan_period=s.get("scan_period"),
            )
            for s in data.get("scans", [])
        )
        manifest = DatasetManifest(
            root=root,
            scans=scans,
            imu=data["imu"],
            ground_truth=data.get("ground_truth"),
        )
        manifest.validate()
        return manifest

    def validate(self) -> None:
        if not self.scans:
            raise ManifestError("manifest lists no scans")
        starts = np.array([s.t_start for s in self.scans])
        if np.any(np.diff(starts) <= 0.0):
            raise ManifestError("scan t_start values must be strictly increasing")
        for entry in self.scans:
            if not self.scan_path(entry).exists():
                raise ManifestError(f"missing scan file: {self.scan_path(entry)}")
            lp = self.label_path(entry)
            if lp is not None and not lp.exists():
                raise ManifestError(f"missing label file: {lp}")
        if not self.imu_path().exists():
            raise ManifestError(f"missing IMU log: {self.imu_path()}")
        gt = self.ground_truth_path()
        if gt is not None and not gt.exists():
            raise ManifestError(f"missing ground-truth trajectory: {gt}")

    def save(self) -> None:
        data = {
            "scans": [
                {
                    "file": s.file,
                    "t_start": s.t_start,
                    **({"labels": s.labels} if s.labels else {}),
                    **({"scan_period": s.scan_period} if s.scan_period is not None else {}),
                }
                for s in self.scans
            ],
            "imu": self.imu,
        }
        if self.ground_truth:
            data["ground_truth"] = self.ground_truth
        lio_io.atomic_write_text(self.root / "manifest.json", json.dumps(data, indent=1))


# ---------------------------------------------------------------------------
# Dataset synthesis
# ---------------------------------------------------------------------------

def simulate_dataset(scenario: SimScenario, out_dir, seed: int = 0) -> DatasetManifest:
    """Render a scenario to disk: scans, labels, IMU log, ground truth, manifest."""
    root = Path(out_dir)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)

    profile = scenario.profile
    lidar = scenario.lidar
    scan_interval = lidar.scan_period  # back-to-back revolutions
    entries = []
    t = profile.t0 + 0.5 * lidar.scan_period
    index = 0
    while t + lidar.scan_period <= profile.t1 - 1e-9:
        scan = render_scan(scenario.world, profile, t, lidar)
        name = f"scans/{index:06d}.bin"
        label_name = f"labels/{index:06d}.bin"
        lio_io.write_scan_bin(root / name, scan.positions, scan.intensities)
        lio_io.write_labels(root / label_name, scan.labels)
        entries.append(
            ScanEntry(
                file=name,
                t_start=scan.t_start,
                labels=label_name,
                scan_period=scan.scan_period,
            )
        )
        index += 1
        t += scan_interval

    imu = synthesize_imu(
        profile,
        scenario.imu_rate,
        accel_bias=scenario.accel_bias,
        gyro_bias=scenario.gyro_bias,
        accel_noise_std=scenario.accel_noise_std,
        gyro_noise_std=scenario.gyro_noise_std,
        seed=seed,
    )
    lio_io.write_imu_txt(root / "imu.txt", imu)

    gt_times = imu.times
    gt_pos, gt_quat = profile.pose_arrays(gt_times)
    lio_io.write_trajectory_tum(
        root / "ground_truth.tum",
        Trajectory(times=gt_times.copy(), positions=gt_pos, quaternions=gt_quat),
    )
    manifest = DatasetManifest(
        root=root, scans=tuple(entries), imu="imu.txt", ground_truth="ground_truth.tum"
    )
    manifest.save()
    return manifest


def load_scan(manifest: DatasetManifest, entry: ScanEntry, default_period: float) -> LaserScan:
    """Read a cloud file and rebuild azimuths/timestamps from point order."""
    positions, intensities = lio_io.read_scan_bin(manifest.scan_path(entry))
    labels = None
    lp = manifest.label_path(entry)
    if lp is not None:
        labels = lio_io.read_labels(lp, expected_count=len(positions))
    azimuths = np.mod(np.arctan2(positions[:, 1], positions[:, 0]), TWO_PI)
    rel = azimuths - (azimuths[0] if len(azimuths) else 0.0)
    rel = np.where(rel < -1e-12, rel + TWO_PI, rel)
    theta_end = float(rel[-1]) if len(rel) and rel[-1] > 0 else TWO_PI
    period = entry.scan_period if entry.scan_period is not None else default_period
    scan = LaserScan(
        positions=positions,
        intensities=intensities,
        azimuths=azimuths,
        timestamps=np.full(len(positions), entry.t_start),
        t_start=entry.t_start,
        scan_period=period,
        theta_end=theta_end,
        labels=labels,
    )
    return stamp_points(scan)


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------

@dataclass
class StageTimer:
    total: float = 0.0
    count: int = 0

    def add(self, seconds: float) -> None:
        self.total += seconds
        self.count += 1

    @property
    def mean_ms(self) -> float:
        return 1000.0 * self.total / self.count if self.count else 0.0


@dataclass
class RunReport:
    stages: dict[str, StageTimer] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def timer(self, name: str) -> StageTimer:
        return self.stages.setdefault(name, StageTimer())

    def bump(self, name: str, amount: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + amount

    def odometry_rate_ratio(self) -> float:
        updates = self.counters.get("odometry_propagations", 0)
        mapping = max(self.counters.get("mapping_events", 0), 1)
        return updates / mapping

    def to_text(self) -> str:
        lines = ["run report", "", "stage timings (mean ms per call):"]
        for name, timer in self.stages.items():
            lines.append(f"{name}: {timer.mean_ms:.2f} ms over {timer.count} calls")
        lines.append("")
        lines.append("counters:")
        for name in sorted(self.counters):
            lines.append(f"{name}: {self.counters[name]}")
        lines.append(f"odometry_to_mapping_ratio: {self.odometry_rate_ratio():.1f}")
        if self.notes:
            lines.append("")
            lines.append("notes:")
            lines.extend(self.notes)
        return "\n".join(lines) + "\n"


@dataclass
class PipelineResult:
    odometry: Trajectory
    refined: Trajectory
    map_points: np.ndarray
    report: RunReport
    detections: list[DetectionResult]


def _initial_state(manifest: DatasetManifest, imu: ImuTrack, config: PipelineConfig) -> NominalState:
    gt_path = manifest.ground_truth_path()
    if not config.init_from_ground_truth or gt_path is None:
        return NominalState()
    gt = lio_io.read_trajectory_tum(gt_path)
    t0 = imu.times[0]
    i = int(np.clip(np.searchsorted(gt.times, t0), 0, len(gt) - 2))
    pose = gt.pose(i)
    dt = gt.times[i + 1] - gt.times[i]
    velocity = (gt.positions[i + 1] - gt.positions[i]) / dt
    return NominalState(velocity=velocity, position=pose.translation, rotation=pose.rotation)


def _initial_covariance(config: PipelineConfig) -> np.ndarray:
    diag = np.concatenate(
        [
            np.full(3, config.init_vel_std**2),
            np.full(3, config.init_pos_std**2),
            np.full(3, config.init_rot_std**2),
            np.full(3, config.init_accel_bias_std**2),
            np.full(3, config.init_gyro_bias_std**2),
        ]
    )
    return np.diag(diag)


def _make_classifier(config: PipelineConfig):
    if config.classifier == "oracle":
        return OracleClassifier()
    return HeuristicClassifier(
        min_height=config.heuristic_min_height,
        max_height=config.heuristic_max_height,
        min_points=config.heuristic_min_points,
    )


def run_pipeline(manifest: DatasetManifest, config: PipelineConfig) -> PipelineResult:
    """Process a dataset through deskew, detection, odometry and mapping."""
    config.validate()
    manifest.validate()
    report = RunReport()
    imu = lio_io.read_imu_txt(manifest.imu_path())

    state = _initial_state(manifest, imu, config)
    noise = NoiseParams(
        accel_noise=config.accel_noise_std,
        gyro_noise=config.gyro_noise_std,
        accel_walk=config.accel_walk_std,
        gyro_walk=config.gyro_walk_std,
    )
    filt = OdometryFilter(
        state,
        _initial_covariance(config),
        noise,
        start_time=float(imu.times[0]),
        gravity=config.gravity,
        staleness_window=config.staleness_window,
        joseph=config.joseph_update,
    )
    mapping = MappingBackend(
        MappingConfig(
            leaf=config.map_leaf,
            ndt_voxel=config.ndt_voxel,
            matching_leaf=config.matching_leaf,
            submap_radius=config.submap_radius,
            stride=config.mapping_stride,
            max_iterations=config.register_max_iterations,
            translation_tolerance=config.register_translation_tolerance,
            rotation_tolerance=config.register_rotation_tolerance,
            n_threads=config.ndt_threads,
        )
    )
    classifier = _make_classifier(config)
    extrinsic = Pose(
        Rotation.from_rotvec(config.extrinsic_rotvec), config.extrinsic_translation
    )
    extrinsic_is_identity = bool(
        np.allclose(config.extrinsic_rotvec, 0.0) and np.allclose(config.extrinsic_translation, 0.0)
    )
    detections: list[DetectionResult] = []

    imu_index = 1  # sample 0 defines the filter start time
    for scan_index, entry in enumerate(manifest.scans):
        stage = "preprocess"
        try:
            t0 = time.perf_counter()
            scan = load_scan(manifest, entry, config.scan_period)
            scan_end = scan.t_start + scan.scan_period
            while imu_index < len(imu) and imu.times[imu_index] <= scan_end + 1e-9:
                filt.process_imu(imu.sample(imu_index))
                imu_index += 1
                report.bump("odometry_propagations")
            if filt.time < scan_end:
                report.notes.append(f"scan {scan_index}: IMU stream ended mid-scan, stopping")
                break
            if not extrinsic_is_identity:
                scan = scan.with_positions(extrinsic.transform(scan.positions))
            undistorted = deskew(scan, filt.buffer, config.orientation_interp)
            report.timer("scan_preprocess").add(time.perf_counter() - t0)

            stage = "detection"
            t0 = time.perf_counter()
            if config.detection_enabled:
                detection = filter_dynamic(
                    undistorted,
                    classifier,
                    GridConfig(config.grid_half_range, config.grid_cell_size),
                    DetectionGates(
                        min_points=config.gate_min_points,
                        min_extent=config.gate_min_extent,
                        max_extent=config.gate_max_extent,
                        min_mean_objectness=config.gate_min_mean_objectness,
                        min_positiveness=config.gate_min_positiveness,
                    ),
                    config.objectness_threshold,
                )
                static_scan = detection.static_scan
                detections.append(detection)
                report.bump("removed_dynamic_points", int(len(detection.dynamic_indices)))
                if detection.fail_open:
                    report.bump("detection_fail_open")
            else:
                static_scan = undistorted
            report.timer("dynamic_detection").add(time.perf_counter() - t0)

            stage = "odometry"
            t0 = time.perf_counter()
            prior_pose, _ = filt.buffer.interpolate(scan.t_start)
            measurement_pose = prior_pose
            measurement_cov = None
            if not mapping.map.is_empty():
                match_points = downsample(static_scan.positions, config.matching_leaf)
                submap = mapping.map.ndt.submap(prior_pose.translation, config.submap_radius)
                try:
                    result = register(
                        submap,
                        match_points,
                        prior_pose,
                        max_iterations=config.register_max_iterations,
                        translation_tolerance=config.register_translation_tolerance,
                        rotation_tolerance=config.register_rotation_tolerance,
                        n_threads=config.ndt_threads,
                    )
                    if result.converged:
                        measurement_pose = result.pose
                        measurement_cov = result.covariance * config.measurement_cov_scale
                    else:
                        report.bump("registration_diverged")
                except NoOverlapError:
                    report.bump("registration_no_overlap")
                if measurement_cov is not None:
                    try:
                        diag = filt.process_measurement(
                            PoseObservation(scan.t_start, measurement_pose, measurement_cov)
                        )
                        report.bump("odometry_updates" if diag.applied else "measurements_dropped")
                    except (DegenerateMeasurementError, ConditioningError) as exc:
                        report.bump("measurements_rejected")
                        report.notes.append(f"scan {scan_index}: measurement rejected: {exc}")
            report.timer("laser_odometry").add(time.perf_counter() - t0)

            stage = "mapping"
            if scan_index % config.mapping_stride == 0:
                t0 = time.perf_counter()
                prior_cov6 = filt.cov[3:9, 3:9] if measurement_cov is None else measurement_cov
                mapping.refine_and_integrate(
                    static_scan,
                    measurement_pose if measurement_cov is not None else prior_pose,
                    prior_cov6,
                    scan.t_start,
                )
                report.bump("mapping_events")
                report.timer("laser_mapping").add(time.perf_counter() - t0)
        except Exception as exc:
            raise PipelineError(f"scan {scan_index} failed in stage '{stage}': {exc}") from exc

    refined_events = [e for e in mapping.events if e.integrated]
    if refined_events:
        refined = Trajectory.from_poses(
            [e.timestamp for e in refined_events], [e.refined for e in refined_events]
        )
    else:
        refined = filt.trajectory()
    report.bump("scans_processed", len(manifest.scans))
    return PipelineResult(
        odometry=filt.trajectory(),
        refined=refined,
        map_points=mapping.map.points(),
        report=report,
        detections=detections,
    )


def write_outputs(result: PipelineResult, out_dir) -> None:
    """Write trajectories, map export, and the run report atomically."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lio_io.atomic_write(
        out / "odometry.tum", lambda p: lio_io.write_trajectory_tum(p, result.odometry)
    )
    lio_io.atomic_write(
        out / "refined.tum", lambda p: lio_io.write_trajectory_tum(p, result.refined)
    )
    lio_io.atomic_write(
        out / "map.bin",
        lambda p: lio_io.write_scan_bin(
            p, result.map_points, np.zeros(len(result.map_points))
        ),
    )
    lio_io.atomic_write_text(out / "report.txt", result.report.to_text())
