"""Rotations, rigid transforms and small fixed-size helpers shared by every stage.

Rotations are stored as unit quaternions (x, y, z, w) and renormalized after
every composition so long filter runs do not accumulate drift.  All angles are
radians; the world frame is z-up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this angle the exponential/log maps switch to their Taylor expansions.
_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]x such that [v]x @ u = v x u."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


# ---------------------------------------------------------------------------
# Vectorized quaternion helpers (x, y, z, w), last axis = 4.
# ---------------------------------------------------------------------------

def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 * q2; broadcasts over leading axes."""
    x1, y1, z1, w1 = np.moveaxis(np.asarray(q1, dtype=float), -1, 0)
    x2, y2, z2, w2 = np.moveaxis(np.asarray(q2, dtype=float), -1, 0)
    return np.stack(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def rotvec_to_quat(rv: np.ndarray) -> np.ndarray:
    """Exponential map, rotation vector -> unit quaternion; broadcasts over (..., 3)."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(half)/angle, with its Taylor expansion 1/2 - angle^2/48 near zero
    small = angle < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    xyz = rv * k
    w = np.cos(half)
    return quat_normalize(np.concatenate([xyz, w], axis=-1))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Log map, unit quaternion -> rotation vector with angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    # force w >= 0 so the recovered angle is minimal
    q = np.where(q[..., 3:4] < 0.0, -q, q)
    norm_xyz = np.linalg.norm(q[..., :3], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(norm_xyz, q[..., 3:4])
    small = norm_xyz < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(small, 2.0 / np.clip(q[..., 3:4], 1e-12, None), angle / np.where(small, 1.0, norm_xyz))
    return q[..., :3] * scale


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion -> rotation matrix; (..., 4) -> (..., 3, 3)."""
    x, y, z, w = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.stack(
        [
            1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy),
            2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx),
            2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix -> unit quaternion (x, y, z, w), Shepperd's method."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        x = 0.25 * s
        w = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        y = 0.25 * s
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        z = 0.25 * s
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
    return quat_normalize(np.array([x, y, z, w]))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by quaternions q (..., 4)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qv = q[..., :3]
    w = q[..., 3:4]
    t = 2.0 * np.cross(qv, v)
    return v + w * t + np.cross(qv, t)


def right_jacobian(rv: np.ndarray) -> np.ndarray:
    """Right Jacobian of the rotation exponential map at rotation vector rv."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv)
    s = skew(rv)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * s + s @ s / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / a2 * s
        + (angle - np.sin(angle)) / (a2 * angle) * (s @ s)
    )


# ---------------------------------------------------------------------------
# Rotation / Pose value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rotation:
    """Element of SO(3) stored as a unit quaternion (x, y, z, w)."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(np.asarray(self.quat, dtype=float)))

    @staticmethod
    def identity() -> "Rotation":
        return Rotation()

    @staticmethod
    def from_quat(q: np.ndarray) -> "Rotation":
        return Rotation(np.asarray(q, dtype=float))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        return Rotation(matrix_to_quat(m))

    @staticmethod
    def from_rotvec(rv: np.ndarray) -> "Rotation":
        return Rotation(rotvec_to_quat(np.asarray(rv, dtype=float)))

    @staticmethod
    def about_z(yaw: float) -> "Rotation":
        return Rotation.from_rotvec(np.array([0.0, 0.0, float(yaw)]))

    def as_quat(self) -> np.ndarray:
        return self.quat.copy()

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.quat)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.quat, other.quat))

    def inverse(self) -> "Rotation":
        return Rotation(quat_conjugate(self.quat))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.quat, np.asarray(v, dtype=float))

    def slerp(self, other: "Rotation", alpha: float) -> "Rotation":
        """Constant-angular-velocity interpolation from self (alpha=0) to other (alpha=1)."""
        rel = quat_to_rotvec(quat_multiply(quat_conjugate(self.quat), other.quat))
        return self @ Rotation.from_rotvec(alpha * rel)

    def angle_to(self, other: "Rotation") -> float:
        return float(np.linalg.norm((self.inverse() @ other).as_rotvec()))


def rotation_from_vector(phi: np.ndarray) -> Rotation:
    """Exponential-map rotation from a rotation vector (Rodrigues form)."""
    return Rotation.from_rotvec(phi)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_world = rotation @ x_local + translation."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "Pose":
        rot_inv = self.rotation.inverse()
        return Pose(rot_inv, -rot_inv.apply(self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.apply(points) + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def inverse(p: Pose) -> Pose:
    return p.inverse()


def transform_point(p: Pose, x: np.ndarray) -> np.ndarray:
    return p.transform(x)
