"""Normal-distributions-transform scan matching.

A reference cloud is summarized as per-voxel Gaussians; registration maximizes
the sum of per-point Gaussian responses with analytic gradient and Hessian in
the 6-dim pose tangent (translation, then right-multiplied rotation vector,
matching the filter's error convention).  Point evaluation is chunked with a
fixed reduction order so threaded and serial runs are bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, Rotation, skew

# eigenvalue clamp ratio for voxel covariances, relative to the largest eigenvalue
COV_EIG_RATIO = 1e-3
# variance floor (m^2) used when a voxel has no scatter at all
MIN_SCATTER = 1e-3
# fixed evaluation chunk so the reduction order never depends on thread count
_CHUNK = 4096

_KEY_OFF = 1 << 20
_KEY_SHIFT = 21


class NoOverlapError(Exception):
    """No query point fell into any scoreable voxel."""


def pack_voxel_keys(indices: np.ndarray) -> np.ndarray:
    """Pack integer (n, 3) voxel indices into sortable int64 keys."""
    ix = indices + _KEY_OFF
    if np.any(ix < 0) or np.any(ix >= (1 << _KEY_SHIFT)):
        raise ValueError("voxel index out of packable range")
    return (ix[:, 0].astype(np.int64) << (2 * _KEY_SHIFT)) | (
        ix[:, 1].astype(np.int64) << _KEY_SHIFT
    ) | ix[:, 2].astype(np.int64)


def unpack_voxel_keys(keys: np.ndarray) -> np.ndarray:
    mask = (1 << _KEY_SHIFT) - 1
    ix = (keys >> (2 * _KEY_SHIFT)) & mask
    iy = (keys >> _KEY_SHIFT) & mask
    iz = keys & mask
    return np.stack([ix, iy, iz], axis=1).astype(np.int64) - _KEY_OFF


def voxel_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


def _regularize(cov: np.ndarray) -> np.ndarray:
    """Clamp eigenvalues to COV_EIG_RATIO of the (floored) largest eigenvalue."""
    vals, vecs = np.linalg.eigh(cov)
    top = max(float(vals[-1]), MIN_SCATTER)
    vals = np.maximum(vals, COV_EIG_RATIO * top)
    return (vecs * vals) @ vecs.T


class NdtVoxelMap:
    """Sparse voxel grid of Gaussian statistics supporting incremental updates.

    Voxels with fewer than min_points members are kept in the accumulator but
    excluded from scoring.
    """

    def __init__(self, voxel_size: float, min_points: int = 5):
        if voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.min_points = int(min_points)
        # key -> [n, sum_x (3,), sum_xxT (3, 3)]
        self._acc: dict[int, list] = {}
        self._finalized = None

    def __len__(self) -> int:
        return len(self._acc)

    def update(self, points: np.ndarray) -> None:
        """Fold points into the per-voxel running sums."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if points.shape[0] == 0:
            return
        keys = pack_voxel_keys(voxel_indices(points, self.voxel_size))
        uniq, inv = np.unique(keys, return_inverse=True)
        counts = np.bincount(inv)
        sums = np.zeros((len(uniq), 3))
        np.add.at(sums, inv, points)
        outer = points[:, :, None] * points[:, None, :]
        sq = np.zeros((len(uniq), 3, 3))
        np.add.at(sq, inv, outer)
        for k, key in enumerate(uniq):
            entry = self._acc.get(int(key))
            if entry is None:
                self._acc[int(key)] = [int(counts[k]), sums[k].copy(), sq[k].copy()]
            else:
                entry[0] += int(counts[k])
                entry[1] += sums[k]
                entry[2] += sq[k]
        self._finalized = None

    def voxel_stats(self, point: np.ndarray):
        """(count, mean, regularized covariance) of the voxel containing point."""
        key = int(pack_voxel_keys(voxel_indices(np.asarray(point)[None, :], self.voxel_size))[0])
        entry = self._acc.get(key)
        if entry is None:
            return 0, None, None
        n, sx, sxx = entry
        mean = sx / n
        if n < 2:
            cov = np.zeros((3, 3))
        else:
            cov = (sxx - n * np.outer(mean, mean)) / (n - 1)
        return n, mean, _regularize(cov)

    def _finalize(self):
        if self._finalized is not None:
            return self._finalized
        keys, mus, icovs = [], [], []
        for key, (n, sx, sxx) in self._acc.items():
            if n < self.min_points:
                continue
            mean = sx / n
            cov = (sxx - n * np.outer(mean, mean)) / (n - 1)
            keys.append(key)
            mus.append(mean)
            icovs.append(np.linalg.inv(_regularize(cov)))
        if keys:
            order = np.argsort(np.asarray(keys, dtype=np.int64))
            keys = np.asarray(keys, dtype=np.int64)[order]
            mus = np.asarray(mus)[order]
            icovs = np.asarray(icovs)[order]
        else:
            keys = np.zeros(0, dtype=np.int64)
            mus = np.zeros((0, 3))
            icovs = np.zeros((0, 3, 3))
        self._finalized = (keys, mus, icovs)
        return self._finalized

    @property
    def scoreable_count(self) -> int:
        return len(self._finalize()[0])

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Index of the containing scoreable voxel per point, -1 when unmapped."""
        keys, _, _ = self._finalize()
        q = pack_voxel_keys(voxel_indices(points, self.voxel_size))
        if len(keys) == 0:
            return np.full(len(q), -1, dtype=np.int64)
        pos = np.searchsorted(keys, q)
        pos = np.clip(pos, 0, len(keys) - 1)
        out = np.where(keys[pos] == q, pos, -1)
        return out

    def submap(self, center: np.ndarray, radius: float) -> "NdtVoxelMap":
        """New map holding only voxels whose centers lie within radius of center."""
        sub = NdtVoxelMap(self.voxel_size, self.min_points)
        if not self._acc:
            return sub
        all_keys = np.fromiter(self._acc.keys(), dtype=np.int64, count=len(self._acc))
        centers = (unpack_voxel_keys(all_keys) + 0.5) * self.voxel_size
        keep = np.linalg.norm(centers - np.asarray(center, dtype=float), axis=1) <= radius
        for key in all_keys[keep]:
            n, sx, sxx = self._acc[int(key)]
            sub._acc[int(key)] = [n, sx.copy(), sxx.copy()]
        return sub


def build_voxel_map(points: np.ndarray, voxel_size: float, min_points: int = 5) -> NdtVoxelMap:
    vmap = NdtVoxelMap(voxel_size, min_points)
    vmap.update(points)
    return vmap


# ---------------------------------------------------------------------------
# Score, gradient, Hessian
# ---------------------------------------------------------------------------

def _chunk_terms(vmap, points, rot_mat, translation, with_derivs):
    """Score (and optionally gradient/Hessian) contribution of one point chunk."""
    y = points @ rot_mat.T + translation
    idx = vmap.lookup(y)
    hit = idx >= 0
    n_hit = int(hit.sum())
    if n_hit == 0:
        zero6 = np.zeros(6)
        return 0.0, zero6, np.zeros((6, 6)), 0
    _, mus, icovs = vmap._finalize()
    x = points[hit]
    d = y[hit] - mus[idx[hit]]
    lam = icovs[idx[hit]]
    lam_d = np.einsum("nij,nj->ni", lam, d)
    e = np.exp(-0.5 * np.einsum("ni,ni->n", d, lam_d))
    score = float(e.sum())
    if not with_derivs:
        return score, None, None, n_hit

    u = lam_d @ rot_mat  # R^T Lambda d per point
    b = np.concatenate([lam_d, np.cross(x, u)], axis=1)  # J^T Lambda d
    grad = -(e[:, None] * b).sum(axis=0)

    # J^T Lambda J and the second-order rotation term, assembled blockwise
    m = rot_mat @ skew_batch(x)  # R [x]_x, (n, 3, 3)
    lam_m = np.einsum("nij,njk->nik", lam, m)
    jlj = np.empty((n_hit, 6, 6))
    jlj[:, :3, :3] = lam
    jlj[:, :3, 3:] = -lam_m
    jlj[:, 3:, :3] = -np.transpose(lam_m, (0, 2, 1))
    jlj[:, 3:, 3:] = np.einsum("nji,njk->nik", m, lam_m)

    curv = np.zeros((n_hit, 6, 6))
    ux = np.einsum("ni,ni->n", u, x)
    curv[:, 3:, 3:] = 0.5 * (
        x[:, :, None] * u[:, None, :] + u[:, :, None] * x[:, None, :]
    ) - ux[:, None, None] * np.eye(3)

    bb = b[:, :, None] * b[:, None, :]
    hess = (e[:, None, None] * (bb - jlj - curv)).sum(axis=0)
    return score, grad, hess, n_hit


def skew_batch(v: np.ndarray) -> np.ndarray:
    """Batched skew-symmetric matrices, (n, 3) -> (n, 3, 3)."""
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _score_reduce(vmap, points, pose, with_derivs, n_threads):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    rot_mat = pose.rotation.as_matrix()
    t = pose.translation
    chunks = [slice(i, min(i + _CHUNK, len(points))) for i in range(0, len(points), _CHUNK)]
    if not chunks:
        return 0.0, np.zeros(6), np.zeros((6, 6)), 0
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(
                pool.map(lambda s: _chunk_terms(vmap, points[s], rot_mat, t, with_derivs), chunks)
            )
    else:
        parts = [_chunk_terms(vmap, points[s], rot_mat, t, with_derivs) for s in chunks]
    score = 0.0
    grad = np.zeros(6)
    hess = np.zeros((6, 6))
    matched = 0
    for s, g, h, n_hit in parts:  # fixed chunk order: deterministic reduction
        score += s
        matched += n_hit
        if with_derivs and n_hit:
            grad += g
            hess += h
    return score, grad, hess, matched


def ndt_score(vmap: NdtVoxelMap, points: np.ndarray, pose: Pose, n_threads: int = 1):
    """Sum of per-point Gaussian responses with analytic gradient and Hessian.

    Points landing in unmapped voxels contribute nothing.  Returns
    (score, gradient, hessian) in the (translation, rotation) tangent at pose.
    """
    if vmap.scoreable_count == 0:
        raise NoOverlapError("voxel map has no scoreable voxels")
    score, grad, hess, _ = _score_reduce(vmap, points, pose, True, n_threads)
    return score, grad, hess


def _apply_step(pose: Pose, step: np.ndarray) -> Pose:
    return Pose(
        pose.rotation @ Rotation.from_rotvec(step[3:]),
        pose.translation + step[:3],
    )


@dataclass(frozen=True)
class RegistrationResult:
    pose: Pose
    score: float
    iterations: int
    converged: bool
    hessian: np.ndarray
    covariance: np.ndarray
    matched_points: int


def _pose_covariance(hess: np.ndarray) -> np.ndarray:
    """Covariance as the inverse of the negated Hessian, PSD-projected."""
    a = -0.5 * (hess + hess.T)
    vals, vecs = np.linalg.eigh(a)
    top = max(float(vals[-1]), 1e-12)
    vals = np.maximum(vals, 1e-6 * top)
    return (vecs / vals) @ vecs.T


def register(
    vmap: NdtVoxelMap,
    points: np.ndarray,
    initial: Pose,
    max_iterations: int = 30,
    translation_tolerance: float = 1e-4,
    rotation_tolerance: float = 1e-5,
    n_threads: int = 1,
) -> RegistrationResult:
    """Newton ascent on the NDT score with step-halving line search.

    Raises NoOverlapError when no point scores at the initial pose; a
    non-finite score yields a diverged result (converged=False).
    """
    if not np.all(np.isfinite(initial.translation)):
        raise ValueError("initial pose is not finite")
    pose = initial
    score, grad, hess, matched = _score_reduce(vmap, points, pose, True, n_threads)
    if matched == 0:
        raise NoOverlapError("no points overlap the voxel map at the initial pose")
    iterations = 0
    converged = False
    for iterations in range(1, max_iterations + 1):
        if not np.isfinite(score):
            return RegistrationResult(pose, score, iterations, False, hess, _pose_covariance(hess), matched)
        a = -0.5 * (hess + hess.T)
        vals = np.linalg.eigvalsh(a)
        floor = 1e-9 + 1e-6 * max(abs(float(vals[-1])), 1.0)
        if vals[0] < floor:
            a = a + (floor - float(vals[0])) * np.eye(6)
        step = np.linalg.solve(a, grad)

        improved = False
        alpha = 1.0
        for _ in range(9):
            candidate = _apply_step(pose, alpha * step)
            new_score, _, _, new_matched = _score_reduce(vmap, points, candidate, False, n_threads)
            if np.isfinite(new_score) and new_score > score:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            converged = True  # no ascent direction left: local optimum
            break
        pose = candidate
        delta = alpha * step
        score, grad, hess, matched = _score_reduce(vmap, points, pose, True, n_threads)
        if (
            np.linalg.norm(delta[:3]) < translation_tolerance
            and np.linalg.norm(delta[3:]) < rotation_tolerance
        ):
            converged = True
            break
    return RegistrationResult(
        pose=pose,
        score=score,
        iterations=iterations,
        converged=converged,
        hessian=hess,
        covariance=_pose_covariance(hess),
        matched_points=matched,
    )
