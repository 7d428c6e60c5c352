"""Moving-object rejection: grid features, cell classification, clustering.

A scan is projected onto a sensor-centered X-Y grid; per-cell channel
statistics feed a pluggable classifier (a geometric heuristic and a
simulation-oracle classifier ship in-tree), above-threshold cells are merged
into obstacle candidates with a path-compressed union-find, and surviving
clusters after the post-processing gates have their points removed.  Points
outside the grid bypass detection and stay static.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .types import LaserScan

CLASS_NAMES = ("vehicle", "pedestrian", "cyclist", "background")


class ClassifierError(Exception):
    """Raised by classifiers that cannot produce predictions for a scan."""


@dataclass(frozen=True)
class GridConfig:
    half_range: float = 60.0
    cell_size: float = 0.25

    @property
    def cells_per_side(self) -> int:
        return int(round(2.0 * self.half_range / self.cell_size))


@dataclass(frozen=True)
class GridCell:
    """Per-cell channel features; the contract view onto the grid arrays."""

    row: int
    col: int
    count: int
    max_height: float
    mean_height: float
    top_intensity: float
    mean_intensity: float
    center_range: float
    center_angle: float
    occupied: bool
    members: np.ndarray


class CellGrid:
    """Channel features for one scan, struct-of-arrays over n*n flat cells."""

    def __init__(self, config: GridConfig, scan: LaserScan):
        self.config = config
        n = config.cells_per_side
        self.n = n
        half, cell = config.half_range, config.cell_size
        xy = scan.positions[:, :2]
        rows = np.floor((xy[:, 0] + half) / cell).astype(np.int64)
        cols = np.floor((xy[:, 1] + half) / cell).astype(np.int64)
        self.in_range = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
        flat = np.where(self.in_range, rows * n + cols, -1)
        self.cell_of_point = flat

        ncells = n * n
        idx = flat[self.in_range]
        z = scan.positions[self.in_range, 2]
        intens = scan.intensities[self.in_range]
        point_ids = np.nonzero(self.in_range)[0]

        self.count = np.bincount(idx, minlength=ncells)
        self.occupied = self.count > 0
        sum_z = np.zeros(ncells)
        np.add.at(sum_z, idx, z)
        sum_i = np.zeros(ncells)
        np.add.at(sum_i, idx, intens)
        safe = np.maximum(self.count, 1)
        self.mean_height = sum_z / safe
        self.mean_intensity = sum_i / safe
        self.max_height = np.full(ncells, -np.inf)
        np.maximum.at(self.max_height, idx, z)
        self.max_height[~self.occupied] = 0.0

        # membership lists in CSR form, members sorted by height within a cell
        order = np.lexsort((z, idx))
        self._member_ids = point_ids[order]
        self._member_z = z[order]
        self._member_cells = idx[order]
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(idx, minlength=ncells))])

        # intensity of the topmost point per cell (last member after the sort)
        self.top_intensity = np.zeros(ncells)
        occ = np.nonzero(self.occupied)[0]
        top_pos = self.indptr[occ + 1] - 1
        self.top_intensity[occ] = scan.intensities[self._member_ids[top_pos]]

        centers = (np.arange(n) + 0.5) * cell - half
        cx = centers[np.arange(ncells) // n]
        cy = centers[np.arange(ncells) % n]
        self.center_range = np.hypot(cx, cy)
        self.center_angle = np.arctan2(cy, cx)
        self.center_xy = np.stack([cx, cy], axis=1)

    def members(self, flat_index: int) -> np.ndarray:
        return self._member_ids[self.indptr[flat_index]:self.indptr[flat_index + 1]]

    def member_heights(self, flat_index: int) -> np.ndarray:
        return self._member_z[self.indptr[flat_index]:self.indptr[flat_index + 1]]

    def cell(self, row: int, col: int) -> GridCell:
        k = row * self.n + col
        return GridCell(
            row=row,
            col=col,
            count=int(self.count[k]),
            max_height=float(self.max_height[k]),
            mean_height=float(self.mean_height[k]),
            top_intensity=float(self.top_intensity[k]),
            mean_intensity=float(self.mean_intensity[k]),
            center_range=float(self.center_range[k]),
            center_angle=float(self.center_angle[k]),
            occupied=bool(self.occupied[k]),
            members=self.members(k),
        )


def extract_channel_features(scan: LaserScan, config: GridConfig) -> CellGrid:
    """Project a scan into the detection grid and compute per-cell statistics."""
    if config.half_range <= 0.0 or config.cell_size <= 0.0:
        raise ValueError("grid range and resolution must be positive")
    return CellGrid(config, scan)


# ---------------------------------------------------------------------------
# Cell classification
# ---------------------------------------------------------------------------

@dataclass
class CellPredictions:
    """Per-cell obstacle attributes, mirroring the detector output contract."""

    objectness: np.ndarray
    positiveness: np.ndarray
    object_height: np.ndarray
    class_probs: np.ndarray
    center_offset: np.ndarray | None = None

    def validate(self) -> None:
        for name in ("objectness", "positiveness"):
            v = getattr(self, name)
            if np.any(v < -1e-9) or np.any(v > 1.0 + 1e-9):
                raise ValueError(f"{name} outside [0, 1]")
        if np.any(np.abs(self.class_probs.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("class distributions must sum to 1")


def _background_probs(ncells: int) -> np.ndarray:
    probs = np.zeros((ncells, 4))
    probs[:, 3] = 1.0
    return probs


class OracleClassifier:
    """Marks exactly the cells containing simulator-labeled dynamic points.

    Only usable on datasets carrying the ground-truth label channel; used to
    test the rest of the detection pipeline independent of any learned model.
    """

    def predict(self, grid: CellGrid, scan: LaserScan) -> CellPredictions:
        if scan.labels is None:
            raise ClassifierError("oracle classifier requires ground-truth labels")
        ncells = grid.n * grid.n
        objectness = np.zeros(ncells)
        dyn_points = np.nonzero((scan.labels != 0) & grid.in_range)[0]
        cells = np.unique(grid.cell_of_point[dyn_points]) if len(dyn_points) else np.zeros(0, dtype=np.int64)
        objectness[cells] = 1.0
        probs = _background_probs(ncells)
        probs[cells, 3] = 0.0
        probs[cells, 0] = 1.0
        return CellPredictions(
            objectness=objectness,
            positiveness=objectness.copy(),
            object_height=np.where(objectness > 0, grid.max_height, 0.0),
            class_probs=probs,
        )


@dataclass
class HeuristicClassifier:
    """Geometric baseline: obstacle-sized height above the local ground.

    Ground is the 5th-percentile member height over the 3x3 cell
    neighborhood; cells whose relative height falls in the configured band and
    that hold enough points are marked positive.
    """

    min_height: float = 0.3
    max_height: float = 2.8
    min_points: int = 2

    def predict(self, grid: CellGrid, scan: LaserScan) -> CellPredictions:
        n = grid.n
        ncells = n * n
        objectness = np.zeros(ncells)
        heights = np.zeros(ncells)
        occupied = np.nonzero(grid.occupied)[0]
        for k in occupied:
            if grid.count[k] < self.min_points:
                continue
            r, c = divmod(int(k), n)
            neighborhood = []
            for dr in (-1, 0, 1):
                rr = r + dr
                if rr < 0 or rr >= n:
                    continue
                for dc in (-1, 0, 1):
                    cc = c + dc
                    if cc < 0 or cc >= n:
                        continue
                    neighborhood.append(grid.member_heights(rr * n + cc))
            zs = np.concatenate(neighborhood)
            ground = np.percentile(zs, 5.0)
            rel = grid.max_height[k] - ground
            heights[k] = rel
            if self.min_height <= rel <= self.max_height:
                objectness[k] = 1.0
        probs = _background_probs(ncells)
        pos = objectness > 0
        probs[pos, 3] = 0.0
        probs[pos, 0] = 1.0
        return CellPredictions(
            objectness=objectness,
            positiveness=objectness.copy(),
            object_height=heights,
            class_probs=probs,
        )


def classify_cells(grid: CellGrid, scan: LaserScan, classifier) -> CellPredictions:
    predictions = classifier.predict(grid, scan)
    predictions.validate()
    return predictions


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

class UnionFind:
    """Disjoint sets over range(size) with path compression and union by size."""

    def __init__(self, size: int):
        self.parent = np.arange(size, dtype=np.int64)
        self.size = np.ones(size, dtype=np.int64)

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:  # compress the walked path
            self.parent[a], a = root, self.parent[a]
        return int(root)

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


@dataclass(frozen=True)
class ObstacleCluster:
    cell_indices: np.ndarray
    point_indices: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    label: str
    confidence: float
    mean_objectness: float
    mean_positiveness: float


def cluster_cells(
    grid: CellGrid,
    predictions: CellPredictions,
    scan: LaserScan,
    objectness_threshold: float = 0.5,
    processing_order: np.ndarray | None = None,
) -> list[ObstacleCluster]:
    """Merge above-threshold cells into obstacle candidates.

    Each positive cell is linked to the cell its center-offset vector points
    at; without offsets it links to its positive 8-neighbors.  The resulting
    partition does not depend on processing_order, which exists so that
    invariance can be verified.
    """
    if not (0.0 < objectness_threshold < 1.0):
        raise ValueError("objectness threshold must lie in (0, 1)")
    n = grid.n
    positive = np.nonzero(predictions.objectness > objectness_threshold)[0]
    if len(positive) == 0:
        return []
    is_positive = np.zeros(n * n, dtype=bool)
    is_positive[positive] = True
    uf = UnionFind(n * n)
    order = positive if processing_order is None else np.asarray(processing_order)

    offsets = predictions.center_offset
    for k in order:
        k = int(k)
        r, c = divmod(k, n)
        if offsets is not None:
            target_xy = grid.center_xy[k] + offsets[k]
            tr = int(np.floor((target_xy[0] + grid.config.half_range) / grid.config.cell_size))
            tc = int(np.floor((target_xy[1] + grid.config.half_range) / grid.config.cell_size))
            if 0 <= tr < n and 0 <= tc < n and is_positive[tr * n + tc]:
                uf.union(k, tr * n + tc)
        else:
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == 0 and dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < n and 0 <= cc < n and is_positive[rr * n + cc]:
                        uf.union(k, rr * n + cc)

    roots: dict[int, list[int]] = {}
    for k in positive:
        roots.setdefault(uf.find(int(k)), []).append(int(k))

    clusters = []
    for cells in roots.values():
        cells_arr = np.asarray(sorted(cells), dtype=np.int64)
        points = np.sort(np.concatenate([grid.members(k) for k in cells_arr]))
        probs = predictions.class_probs[cells_arr].sum(axis=0)
        label = CLASS_NAMES[int(np.argmax(probs))]
        if len(points):
            pts = scan.positions[points]
            bbox_min, bbox_max = pts.min(axis=0), pts.max(axis=0)
        else:
            bbox_min = bbox_max = np.zeros(3)
        clusters.append(
            ObstacleCluster(
                cell_indices=cells_arr,
                point_indices=points,
                bbox_min=bbox_min,
                bbox_max=bbox_max,
                label=label,
                confidence=float(predictions.objectness[cells_arr].mean()),
                mean_objectness=float(predictions.objectness[cells_arr].mean()),
                mean_positiveness=float(predictions.positiveness[cells_arr].mean()),
            )
        )
    clusters.sort(key=lambda c: int(c.cell_indices[0]))
    return clusters


# ---------------------------------------------------------------------------
# Post-processing and removal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionGates:
    """Cluster acceptance thresholds applied after clustering."""

    min_points: int = 5
    min_extent: float = 0.3
    max_extent: float = 25.0
    min_mean_objectness: float = 0.5
    min_positiveness: float = 0.3


def postprocess_and_remove(
    scan: LaserScan,
    clusters: list[ObstacleCluster],
    gates: DetectionGates = DetectionGates(),
):
    """Drop gated-out clusters, remove the survivors' points from the scan.

    Returns (static_scan, dynamic_indices, surviving_clusters); static scan
    plus the indexed dynamic points partition the input exactly, each side in
    original order.
    """
    removed = np.zeros(len(scan), dtype=bool)
    surviving = []
    for cluster in clusters:
        extent = cluster.bbox_max[:2] - cluster.bbox_min[:2]
        if (
            len(cluster.point_indices) < gates.min_points
            or float(extent.max(initial=0.0)) < gates.min_extent
            or float(extent.max(initial=0.0)) > gates.max_extent
            or cluster.mean_objectness < gates.min_mean_objectness
            or cluster.mean_positiveness < gates.min_positiveness
        ):
            continue  # reinstated as static
        surviving.append(cluster)
        removed[cluster.point_indices] = True
    dynamic_indices = np.nonzero(removed)[0]
    static_scan = scan.subset(np.nonzero(~removed)[0])
    return static_scan, dynamic_indices, surviving


@dataclass(frozen=True)
class DetectionResult:
    static_scan: LaserScan
    dynamic_indices: np.ndarray
    clusters: list[ObstacleCluster]
    fail_open: bool
    diagnostics: dict


def filter_dynamic(
    scan: LaserScan,
    classifier,
    grid_config: GridConfig = GridConfig(),
    gates: DetectionGates = DetectionGates(),
    objectness_threshold: float = 0.5,
) -> DetectionResult:
    """Full detection stage: features, classify, cluster, gate, remove.

    A classifier failure fails open: the scan passes through unfiltered with
    the fail_open flag set so odometry never starves on detection faults.
    """
    grid = extract_channel_features(scan, grid_config)
    try:
        predictions = classify_cells(grid, scan, classifier)
    except Exception as exc:  # fail-open by contract
        return DetectionResult(
            static_scan=scan,
            dynamic_indices=np.zeros(0, dtype=np.int64),
            clusters=[],
            fail_open=True,
            diagnostics={"error": str(exc), "removed_points": 0, "clusters": 0},
        )
    clusters = cluster_cells(grid, predictions, scan, objectness_threshold)
    static_scan, dynamic_indices, surviving = postprocess_and_remove(scan, clusters, gates)
    return DetectionResult(
        static_scan=static_scan,
        dynamic_indices=dynamic_indices,
        clusters=surviving,
        fail_open=False,
        diagnostics={
            "removed_points": int(len(dynamic_indices)),
            "clusters": len(surviving),
            "candidate_clusters": len(clusters),
        },
    )
