"""Flat key=value pipeline configuration with typo-safe loading."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np


class ConfigError(Exception):
    pass


def _vec3(x: float) -> np.ndarray:
    return np.full(3, x)


@dataclass
class PipelineConfig:
    """Every pipeline tunable; keys in config files match the field names."""

    # world / sensor model
    gravity: float = 9.81
    extrinsic_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extrinsic_rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scan_period: float = 0.1

    # IMU noise model (std per axis)
    accel_noise_std: np.ndarray = field(default_factory=lambda: _vec3(0.03))
    gyro_noise_std: np.ndarray = field(default_factory=lambda: _vec3(0.003))
    accel_walk_std: np.ndarray = field(default_factory=lambda: _vec3(1e-4))
    gyro_walk_std: np.ndarray = field(default_factory=lambda: _vec3(1e-5))

    # filter initialization / update behavior
    init_vel_std: float = 0.1
    init_pos_std: float = 0.1
    init_rot_std: float = 0.05
    init_accel_bias_std: float = 0.05
    init_gyro_bias_std: float = 0.01
    init_from_ground_truth: bool = True
    staleness_window: float = 0.3
    joseph_update: bool = False
    orientation_interp: str = "slerp"
    measurement_cov_scale: float = 1.0

    # dynamic object detection
    detection_enabled: bool = True
    classifier: str = "heuristic"
    grid_half_range: float = 60.0
    grid_cell_size: float = 0.25
    objectness_threshold: float = 0.5
    gate_min_points: int = 5
    gate_min_extent: float = 0.3
    gate_max_extent: float = 25.0
    gate_min_mean_objectness: float = 0.5
    gate_min_positiveness: float = 0.3
    heuristic_min_height: float = 0.3
    heuristic_max_height: float = 2.8
    heuristic_min_points: int = 2

    # NDT registration
    ndt_voxel: float = 1.0
    ndt_min_points: int = 5
    matching_leaf: float = 0.5
    register_max_iterations: int = 30
    register_translation_tolerance: float = 1e-4
    register_rotation_tolerance: float = 1e-5
    ndt_threads: int = 1

    # mapping backend
    map_leaf: float = 0.5
    submap_radius: float = 150.0
    mapping_stride: int = 10

    # misc
    seed: int = 0
    association_max_dt: float = 0.02

    def validate(self) -> None:
        positive = (
            "gravity", "scan_period", "staleness_window", "grid_half_range",
            "grid_cell_size", "ndt_voxel", "matching_leaf", "map_leaf",
            "submap_radius", "measurement_cov_scale", "association_max_dt",
        )
        for name in positive:
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if self.mapping_stride < 1 or self.register_max_iterations < 1:
            raise ConfigError("mapping_stride and register_max_iterations must be >= 1")
        if not (0.0 < self.objectness_threshold < 1.0):
            raise ConfigError("objectness_threshold must lie in (0, 1)")
        if self.orientation_interp not in ("slerp", "linear"):
            raise ConfigError(f"orientation_interp '{self.orientation_interp}' not in (slerp, linear)")
        if self.classifier not in ("heuristic", "oracle"):
            raise ConfigError(f"classifier '{self.classifier}' not in (heuristic, oracle)")

    # -- parsing ----------------------------------------------------------

    def set_key(self, key: str, raw: str) -> None:
        matching = {f.name: f for f in fields(self)}
        if key not in matching:
            raise ConfigError(f"unknown config key '{key}'")
        current = getattr(self, key)
        try:
            if isinstance(current, bool):
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"not a boolean: {raw}")
                value = raw.lower() in ("true", "1")
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            elif isinstance(current, np.ndarray):
                parts = [float(p) for p in raw.replace(",", " ").split()]
                if len(parts) == 1:
                    parts = parts * 3
                if len(parts) != 3:
                    raise ValueError("expected 1 or 3 numbers")
                value = np.asarray(parts)
            else:
                value = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}") from None
        setattr(self, key, value)

    def apply_overrides(self, overrides) -> None:
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not key=value")
            key, raw = item.split("=", 1)
            self.set_key(key.strip(), raw.strip())
        self.validate()

    @staticmethod
    def from_file(path) -> "PipelineConfig":
        config = PipelineConfig()
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, raw = line.split("=", 1)
            try:
                config.set_key(key.strip(), raw.strip())
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
        config.validate()
        return config

    def to_file(self, path) -> None:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                text = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name}={text}")
        Path(path).write_text("\n".join(lines) + "\n")
