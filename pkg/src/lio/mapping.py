"""Global static map and low-rate frame-to-model pose refinement.

The map keeps two synchronized stores: a voxel-centroid point store bounded by
the downsample leaf, and an incrementally updated NDT voxel map used for
registration.  Refinement registers each consumed scan against a local submap
seeded by the odometry prior and, on convergence, integrates the scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .ndt import NdtVoxelMap, NoOverlapError, pack_voxel_keys, register, voxel_indices
from .types import LaserScan


def downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    """One centroid per occupied leaf voxel, output ordered by voxel index."""
    if leaf <= 0.0:
        raise ValueError("leaf size must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points.copy()
    keys = pack_voxel_keys(voxel_indices(points, leaf))
    uniq, inverse = np.unique(keys, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, points)
    counts = np.bincount(inverse).astype(float)
    return sums / counts[:, None]


class GlobalMap:
    """Accumulated static world points with incremental NDT statistics."""

    def __init__(self, leaf: float = 0.5, ndt_voxel: float = 1.0, ndt_min_points: int = 5):
        self.leaf = float(leaf)
        self._store: dict[int, list] = {}  # leaf voxel key -> [count, position sum]
        self.ndt = NdtVoxelMap(ndt_voxel, ndt_min_points)

    @property
    def point_count(self) -> int:
        return len(self._store)

    def is_empty(self) -> bool:
        return not self._store

    def integrate(self, world_points: np.ndarray) -> int:
        """Fold world-frame points into both stores; returns new point count."""
        world_points = np.asarray(world_points, dtype=float).reshape(-1, 3)
        if len(world_points) == 0:
            return self.point_count
        keys = pack_voxel_keys(voxel_indices(world_points, self.leaf))
        uniq, inverse = np.unique(keys, return_inverse=True)
        sums = np.zeros((len(uniq), 3))
        np.add.at(sums, inverse, world_points)
        counts = np.bincount(inverse)
        for k, key in enumerate(uniq):
            entry = self._store.get(int(key))
            if entry is None:
                self._store[int(key)] = [int(counts[k]), sums[k].copy()]
            else:
                entry[0] += int(counts[k])
                entry[1] += sums[k]
        self.ndt.update(world_points)
        return self.point_count

    def points(self) -> np.ndarray:
        """Stored centroids ordered by voxel key (deterministic export order)."""
        if not self._store:
            return np.zeros((0, 3))
        keys = np.sort(np.fromiter(self._store.keys(), dtype=np.int64, count=len(self._store)))
        out = np.empty((len(keys), 3))
        for i, key in enumerate(keys):
            n, s = self._store[int(key)]
            out[i] = s / n
        return out


@dataclass(frozen=True)
class RefinedPoseEvent:
    timestamp: float
    prior: Pose
    refined: Pose
    covariance: np.ndarray
    integrated: bool
    converged: bool
    matched_points: int
    iterations: int


@dataclass(frozen=True)
class MappingConfig:
    leaf: float = 0.5
    ndt_voxel: float = 1.0
    matching_leaf: float = 0.5
    submap_radius: float = 150.0
    stride: int = 10
    max_iterations: int = 30
    translation_tolerance: float = 1e-4
    rotation_tolerance: float = 1e-5
    n_threads: int = 1


class MappingBackend:
    """Single writer of the global map; consumes every Nth odometry scan."""

    def __init__(self, config: MappingConfig = MappingConfig()):
        self.config = config
        self.map = GlobalMap(leaf=config.leaf, ndt_voxel=config.ndt_voxel)
        self.events: list[RefinedPoseEvent] = []

    def refine_and_integrate(
        self,
        scan: LaserScan,
        prior: Pose,
        prior_cov: np.ndarray,
        timestamp: float,
    ) -> RefinedPoseEvent:
        """Register the deskewed static scan against the map, then integrate it.

        The first scan bootstraps the map at the prior pose unconditionally.
        On divergence or missing overlap the prior is kept and integration is
        skipped (flagged on the event).  The refined covariance is the
        information fusion of the prior and registration covariances, so it
        never exceeds the prior.
        """
        cfg = self.config
        match_points = downsample(scan.positions, cfg.matching_leaf)
        if self.map.is_empty():
            self.map.integrate(prior.transform(scan.positions))
            event = RefinedPoseEvent(
                timestamp, prior, prior, np.asarray(prior_cov, dtype=float).copy(),
                integrated=True, converged=True, matched_points=len(match_points), iterations=0,
            )
            self.events.append(event)
            return event

        submap = self.map.ndt.submap(prior.translation, cfg.submap_radius)
        try:
            result = register(
                submap,
                match_points,
                prior,
                max_iterations=cfg.max_iterations,
                translation_tolerance=cfg.translation_tolerance,
                rotation_tolerance=cfg.rotation_tolerance,
                n_threads=cfg.n_threads,
            )
        except NoOverlapError:
            result = None
        if result is None or not result.converged:
            event = RefinedPoseEvent(
                timestamp, prior, prior, np.asarray(prior_cov, dtype=float).copy(),
                integrated=False, converged=False,
                matched_points=0 if result is None else result.matched_points,
                iterations=0 if result is None else result.iterations,
            )
            self.events.append(event)
            return event

        info = np.linalg.inv(result.covariance) + np.linalg.inv(prior_cov)
        fused_cov = np.linalg.inv(info)
        fused_cov = 0.5 * (fused_cov + fused_cov.T)
        self.map.integrate(result.pose.transform(scan.positions))
        event = RefinedPoseEvent(
            timestamp, prior, result.pose, fused_cov,
            integrated=True, converged=True,
            matched_points=result.matched_points, iterations=result.iterations,
        )
        self.events.append(event)
        return event
