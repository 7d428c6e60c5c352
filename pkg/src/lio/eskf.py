"""Error-state Kalman filter fusing IMU propagation with scan-matcher poses.

The 15-dim error state is stacked as (velocity, position, orientation,
accelerometer bias, gyroscope bias); orientation error is a minimal 3-vector
injected on the right of the nominal rotation.  Scan-matcher results enter as
a recovered equivalent measurement: the matcher posterior is inverted back
into a 6-dim observation plus noise, then fused with the standard update and
injected into the nominal state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deskew import ImuPoseBuffer
from .geometry import Pose, Rotation, right_jacobian, skew
from .types import ImuSample, ImuTrack, Trajectory

DEFAULT_GRAVITY = 9.81

IDX_V = slice(0, 3)
IDX_P = slice(3, 6)
IDX_TH = slice(6, 9)
IDX_AB = slice(9, 12)
IDX_WB = slice(12, 15)

# observation matrix: the matcher observes (position error, orientation error)
H_POSE = np.zeros((6, 15))
H_POSE[0:3, IDX_P] = np.eye(3)
H_POSE[3:6, IDX_TH] = np.eye(3)

_MAX_CONDITION = 1e12


class DegenerateMeasurementError(Exception):
    """Matcher posterior is not strictly tighter than its prior."""


class ConditioningError(Exception):
    """A linear solve in the update chain is too ill-conditioned to trust."""

    def __init__(self, message: str, condition_number: float):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


class FilterContractError(Exception):
    """Stream ordering violated, e.g. two updates with no propagation between."""


@dataclass(frozen=True)
class NominalState:
    """Nonlinearly propagated estimate: v, p (world), R, and IMU biases."""

    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: Rotation = field(default_factory=Rotation.identity)
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def pose(self) -> Pose:
        return Pose(self.rotation, self.position)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.velocity))
            and np.all(np.isfinite(self.position))
            and np.all(np.isfinite(self.rotation.quat))
            and np.all(np.isfinite(self.accel_bias))
            and np.all(np.isfinite(self.gyro_bias))
        )


@dataclass(frozen=True)
class NoiseParams:
    """Per-axis standard deviations: white measurement noise and bias random walk."""

    accel_noise: np.ndarray = field(default_factory=lambda: np.full(3, 0.03))
    gyro_noise: np.ndarray = field(default_factory=lambda: np.full(3, 0.003))
    accel_walk: np.ndarray = field(default_factory=lambda: np.full(3, 1e-4))
    gyro_walk: np.ndarray = field(default_factory=lambda: np.full(3, 1e-5))

    def __post_init__(self):
        for name in ("accel_noise", "gyro_noise", "accel_walk", "gyro_walk"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if np.any(v < 0.0):
                raise ValueError(f"{name} must be non-negative")
            object.__setattr__(self, name, v)


def default_initial_covariance() -> np.ndarray:
    """Diagonal start covariance: 0.1 m/s, 0.1 m, 0.05 rad, 0.05 m/s^2, 0.01 rad/s."""
    d = np.concatenate(
        [np.full(3, 0.1**2), np.full(3, 0.1**2), np.full(3, 0.05**2), np.full(3, 0.05**2), np.full(3, 0.01**2)]
    )
    return np.diag(d)


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------

def propagation_jacobians(state: NominalState, imu: ImuSample, dt: float):
    """Discrete error-state Jacobians (F_x, F_n) of one propagation step.

    F_x is exact for the one-step map including the dt^2 position terms and
    the right-Jacobian coupling of gyro bias into orientation, so it matches
    finite differences of the full nonlinear step with error injection.
    """
    rot = state.rotation.as_matrix()
    a = imu.accel - state.accel_bias
    w = imu.gyro - state.gyro_bias
    f = np.eye(15)
    f[IDX_V, IDX_TH] = -rot @ skew(a) * dt
    f[IDX_V, IDX_AB] = -rot * dt
    f[IDX_P, IDX_V] = np.eye(3) * dt
    f[IDX_P, IDX_TH] = -0.5 * rot @ skew(a) * dt * dt
    f[IDX_P, IDX_AB] = -0.5 * rot * dt * dt
    f[IDX_TH, IDX_TH] = Rotation.from_rotvec(w * dt).as_matrix().T
    f[IDX_TH, IDX_WB] = -right_jacobian(w * dt) * dt

    fn = np.zeros((15, 12))
    fn[IDX_V, 0:3] = -rot * dt
    fn[IDX_P, 0:3] = -0.5 * rot * dt * dt
    fn[IDX_TH, 3:6] = -np.eye(3) * dt
    fn[IDX_AB, 6:9] = np.eye(3) * np.sqrt(dt)
    fn[IDX_WB, 9:12] = np.eye(3) * np.sqrt(dt)
    return f, fn


def propagate(
    state: NominalState,
    cov: np.ndarray,
    imu: ImuSample,
    dt: float,
    noise: NoiseParams,
    gravity: float = DEFAULT_GRAVITY,
):
    """One Euler integration step of the nominal state plus covariance transport."""
    if not (0.0 < dt <= 0.1):
        raise ValueError(f"dt {dt} outside (0, 0.1]")
    if not state.is_finite() or not np.all(np.isfinite(imu.accel)) or not np.all(np.isfinite(imu.gyro)):
        raise ValueError("non-finite filter input")
    rot = state.rotation
    a = imu.accel - state.accel_bias
    w = imu.gyro - state.gyro_bias
    acc_world = rot.apply(a) + np.array([0.0, 0.0, -gravity])

    new_state = NominalState(
        velocity=state.velocity + acc_world * dt,
        position=state.position + state.velocity * dt + 0.5 * acc_world * dt * dt,
        rotation=rot @ Rotation.from_rotvec(w * dt),
        accel_bias=state.accel_bias,
        gyro_bias=state.gyro_bias,
    )
    f, fn = propagation_jacobians(state, imu, dt)
    qn = np.diag(
        np.concatenate(
            [noise.accel_noise**2, noise.gyro_noise**2, noise.accel_walk**2, noise.gyro_walk**2]
        )
    )
    new_cov = f @ cov @ f.T + fn @ qn @ fn.T
    return new_state, 0.5 * (new_cov + new_cov.T)


# ---------------------------------------------------------------------------
# Measurement recovery and correction
# ---------------------------------------------------------------------------

def recover_measurement(prior_mean, prior_cov, post_mean, post_cov):
    """Invert a measurement-space KF update back into (observation, noise).

    Given the 6-dim pose prior handed to the matcher and the posterior it
    returned, reconstructs the equivalent direct observation delta_y and its
    noise covariance C so the posterior can be reproduced by a standard
    update.  Requires the posterior to be strictly tighter than the prior.
    """
    prior_mean = np.asarray(prior_mean, dtype=float).reshape(6)
    post_mean = np.asarray(post_mean, dtype=float).reshape(6)
    info_post = np.linalg.inv(post_cov)
    info_prior = np.linalg.inv(prior_cov)
    info_gain = 0.5 * ((info_post - info_prior) + (info_post - info_prior).T)
    eigs = np.linalg.eigvalsh(info_gain)
    if eigs[0] <= 0.0:
        raise DegenerateMeasurementError(
            f"posterior covariance not strictly inside prior (min info eigenvalue {eigs[0]:.3e})"
        )
    noise_cov = np.linalg.inv(info_gain)
    noise_cov = 0.5 * (noise_cov + noise_cov.T)

    gain = prior_cov @ np.linalg.inv(prior_cov + noise_cov)
    cond = np.linalg.cond(gain)
    if not np.isfinite(cond) or cond > _MAX_CONDITION:
        raise ConditioningError("measurement-space gain nearly singular", float(cond))
    delta_y = np.linalg.solve(gain, post_mean - prior_mean) + prior_mean
    return delta_y, noise_cov


def correct(
    cov: np.ndarray,
    prior_error: np.ndarray,
    delta_y: np.ndarray,
    noise_cov: np.ndarray,
    joseph: bool = False,
    invert_innovation: bool = True,
):
    """Standard 15-dim update from a recovered 6-dim pose observation.

    invert_innovation=False applies the gain without inverting the innovation
    covariance; it exists only so tests can demonstrate that form is
    inconsistent (gain grows with measurement noise instead of shrinking).
    """
    prior_error = np.asarray(prior_error, dtype=float).reshape(15)
    delta_y = np.asarray(delta_y, dtype=float).reshape(6)
    innovation_cov = H_POSE @ cov @ H_POSE.T + noise_cov
    if invert_innovation:
        cond = np.linalg.cond(innovation_cov)
        if not np.isfinite(cond) or cond > _MAX_CONDITION:
            raise ConditioningError("innovation covariance nearly singular", float(cond))
        gain = np.linalg.solve(innovation_cov.T, (cov @ H_POSE.T).T).T
    else:
        gain = cov @ H_POSE.T @ innovation_cov
    delta_x = gain @ (delta_y - H_POSE @ prior_error)
    i_kh = np.eye(15) - gain @ H_POSE
    if joseph:
        new_cov = i_kh @ cov @ i_kh.T + gain @ noise_cov @ gain.T
    else:
        new_cov = i_kh @ cov
    return delta_x, 0.5 * (new_cov + new_cov.T)


def reset(state: NominalState, delta_x: np.ndarray) -> NominalState:
    """Inject the error estimate into the nominal state (error is zero after)."""
    delta_x = np.asarray(delta_x, dtype=float).reshape(15)
    dtheta = delta_x[IDX_TH]
    if np.linalg.norm(dtheta) >= np.pi:
        raise ValueError("orientation error must stay below pi")
    return NominalState(
        velocity=state.velocity + delta_x[IDX_V],
        position=state.position + delta_x[IDX_P],
        rotation=state.rotation @ Rotation.from_rotvec(dtheta),
        accel_bias=state.accel_bias + delta_x[IDX_AB],
        gyro_bias=state.gyro_bias + delta_x[IDX_WB],
    )


# ---------------------------------------------------------------------------
# Streaming filter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseObservation:
    """World-frame pose measurement from scan matching, with 6x6 covariance."""

    timestamp: float
    pose: Pose
    covariance: np.ndarray


@dataclass(frozen=True)
class UpdateDiagnostic:
    timestamp: float
    applied: bool
    reason: str
    innovation_norm: float = 0.0
    gain_norm: float = 0.0


class OdometryFilter:
    """Single-owner filter state: propagate per IMU sample, update per pose.

    Pose observations may arrive after the filter has advanced past their
    timestamp (scan matching needs the full revolution); the innovation is
    formed against the buffered nominal pose at the observation time and the
    correction applied to the current state, provided the lag stays inside the
    staleness window.
    """

    def __init__(
        self,
        initial_state: NominalState,
        initial_cov: np.ndarray,
        noise: NoiseParams,
        start_time: float,
        gravity: float = DEFAULT_GRAVITY,
        staleness_window: float = 0.3,
        joseph: bool = False,
    ):
        self.state = initial_state
        self.cov = np.asarray(initial_cov, dtype=float).copy()
        self.noise = noise
        self.time = float(start_time)
        self.gravity = float(gravity)
        self.staleness_window = float(staleness_window)
        self.joseph = joseph
        self.buffer = ImuPoseBuffer()
        self.buffer.append(self.time, initial_state.pose(), initial_state.velocity)
        self.diagnostics: list[UpdateDiagnostic] = []
        self.propagation_count = 0
        self.update_count = 0
        self._seen_measurement = False
        self._propagations_since_measurement = 0

    def process_imu(self, sample: ImuSample) -> None:
        dt = sample.timestamp - self.time
        self.state, self.cov = propagate(self.state, self.cov, sample, dt, self.noise, self.gravity)
        self.time = sample.timestamp
        self.buffer.append(self.time, self.state.pose(), self.state.velocity)
        self.propagation_count += 1
        self._propagations_since_measurement += 1

    def process_measurement(self, obs: PoseObservation) -> UpdateDiagnostic:
        if self._seen_measurement and self._propagations_since_measurement == 0:
            raise FilterContractError("no IMU propagation between consecutive measurements")
        if self.time - obs.timestamp > self.staleness_window:
            diag = UpdateDiagnostic(obs.timestamp, False, "stale")
            self.diagnostics.append(diag)
            return diag
        ref_pose, _ = self.buffer.interpolate(obs.timestamp)
        delta_obs = np.concatenate(
            [
                obs.pose.translation - ref_pose.translation,
                (ref_pose.rotation.inverse() @ obs.pose.rotation).as_rotvec(),
            ]
        )
        prior_cov6 = H_POSE @ self.cov @ H_POSE.T
        # fuse the matcher estimate with the prior so the handed-back posterior
        # is strictly tighter, as the recovery step requires
        obs_info = np.linalg.inv(np.asarray(obs.covariance, dtype=float))
        post_cov = np.linalg.inv(np.linalg.inv(prior_cov6) + obs_info)
        post_cov = 0.5 * (post_cov + post_cov.T)
        post_mean = post_cov @ (obs_info @ delta_obs)

        delta_y, noise_cov = recover_measurement(np.zeros(6), prior_cov6, post_mean, post_cov)
        delta_x, new_cov = correct(self.cov, np.zeros(15), delta_y, noise_cov, joseph=self.joseph)
        self.state = reset(self.state, delta_x)
        self.cov = new_cov
        self.update_count += 1
        self._seen_measurement = True
        self._propagations_since_measurement = 0
        diag = UpdateDiagnostic(
            obs.timestamp,
            True,
            "applied",
            innovation_norm=float(np.linalg.norm(delta_obs)),
            gain_norm=float(np.linalg.norm(delta_x)),
        )
        self.diagnostics.append(diag)
        return diag

    def trajectory(self) -> Trajectory:
        times, positions, _, quats = self.buffer.arrays()
        return Trajectory(times.copy(), positions.copy(), quats.copy())


def run_odometry(
    imu: ImuTrack,
    observations: list[PoseObservation],
    initial_state: NominalState,
    initial_cov: np.ndarray,
    noise: NoiseParams,
    start_time: float | None = None,
    gravity: float = DEFAULT_GRAVITY,
    staleness_window: float = 0.3,
) -> tuple[Trajectory, ImuPoseBuffer, OdometryFilter]:
    """Replay time-ordered IMU and measurement streams through the filter.

    Emits one pose per IMU sample; returns the high-rate trajectory, the pose
    buffer consumed by deskewing, and the filter with its diagnostics.
    """
    t0 = float(imu.times[0]) - 1e-6 if start_time is None else float(start_time)
    filt = OdometryFilter(
        initial_state, initial_cov, noise, t0, gravity=gravity, staleness_window=staleness_window
    )
    obs_sorted = sorted(observations, key=lambda o: o.timestamp)
    oi = 0
    for i in range(len(imu)):
        sample = imu.sample(i)
        filt.process_imu(sample)
        while oi < len(obs_sorted) and obs_sorted[oi].timestamp <= filt.time:
            filt.process_measurement(obs_sorted[oi])
            oi += 1
    for obs in obs_sorted[oi:]:
        filt.process_measurement(obs)
    return filt.trajectory(), filt.buffer, filt
