"""Synthetic world: box geometry, analytic trajectories, lidar + IMU rendering.

Every emitted laser point is raycast from the true sensor pose at that point's
own emission time, so rendered scans carry genuine motion distortion.  Points
produced by rays that hit a moving object are flagged in a ground-truth label
channel, which downstream detection tests use as an exact oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import Pose, Rotation, quat_conjugate, quat_rotate
from .types import TWO_PI, ImuTrack, LaserScan

DEFAULT_GRAVITY = 9.81
_RAY_EPS = 1e-6


# ---------------------------------------------------------------------------
# World geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned static box (walls and ground are thin boxes)."""

    lo: np.ndarray
    hi: np.ndarray
    intensity: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        if np.any(self.hi <= self.lo):
            raise ValueError("box hi must exceed lo on every axis")


@dataclass(frozen=True)
class MovingBox:
    """Rigid box following a piecewise-linear position track with fixed attitude.

    extent is the full (dx, dy, dz) size; the box is centered on its track.
    """

    extent: np.ndarray
    track_times: np.ndarray
    track_positions: np.ndarray
    rotation: Rotation = field(default_factory=Rotation.identity)
    intensity: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "extent", np.asarray(self.extent, dtype=float))
        object.__setattr__(self, "track_times", np.asarray(self.track_times, dtype=float))
        object.__setattr__(self, "track_positions", np.asarray(self.track_positions, dtype=float))
        if np.any(np.diff(self.track_times) <= 0.0):
            raise ValueError("track times must be strictly increasing")

    def center_at(self, t: np.ndarray) -> np.ndarray:
        """Piecewise-linear center position, clamped at the track ends; (n,) -> (n, 3)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack(
            [np.interp(t, self.track_times, self.track_positions[:, k]) for k in range(3)],
            axis=-1,
        )

    def contains(self, points: np.ndarray, t: float, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of world points inside the box at time t."""
        local = self.rotation.inverse().apply(np.asarray(points, dtype=float) - self.center_at(t)[0])
        half = 0.5 * self.extent + margin
        return np.all(np.abs(local) <= half, axis=-1)


@dataclass(frozen=True)
class WorldModel:
    static_boxes: tuple[Box, ...]
    moving_boxes: tuple[MovingBox, ...] = ()


def _ray_box_hits(origins, dirs, lo, hi):
    """Slab-method ray/AABB intersection; returns entry distances, inf on miss."""
    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (lo - origins) / d
    t2 = (hi - origins) / d
    tnear = np.minimum(t1, t2).max(axis=-1)
    tfar = np.maximum(t1, t2).min(axis=-1)
    hit = (tfar >= tnear) & (tnear > _RAY_EPS)
    return np.where(hit, tnear, np.inf)


# ---------------------------------------------------------------------------
# Ground-truth trajectory
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryProfile:
    """Twice-differentiable ground-truth motion: position spline + yaw spline.

    Orientation is yaw-about-z only (ground-vehicle regime), which keeps the
    body angular rate analytic: (0, 0, yaw_rate).
    """

    t0: float
    t1: float
    _pos: CubicSpline
    _yaw: CubicSpline

    @staticmethod
    def from_waypoints(times, positions, yaws) -> "TrajectoryProfile":
        times = np.asarray(times, dtype=float)
        positions = np.asarray(positions, dtype=float)
        yaws = np.asarray(yaws, dtype=float)
        return TrajectoryProfile(
            t0=float(times[0]),
            t1=float(times[-1]),
            _pos=CubicSpline(times, positions, bc_type="natural"),
            _yaw=CubicSpline(times, yaws, bc_type="natural"),
        )

    def position(self, t):
        return self._pos(t)

    def velocity(self, t):
        return self._pos(t, 1)

    def acceleration(self, t):
        return self._pos(t, 2)

    def yaw(self, t):
        return self._yaw(t)

    def yaw_rate(self, t):
        return self._yaw(t, 1)

    def rotation(self, t: float) -> Rotation:
        return Rotation.about_z(float(self._yaw(t)))

    def pose(self, t: float) -> Pose:
        return Pose(self.rotation(t), self._pos(t))

    def pose_arrays(self, times: np.ndarray):
        """Vectorized (positions (n, 3), quaternions (n, 4)) at the given times."""
        times = np.asarray(times, dtype=float)
        pos = self._pos(times)
        half = 0.5 * self._yaw(times)
        quat = np.zeros(times.shape + (4,))
        quat[..., 2] = np.sin(half)
        quat[..., 3] = np.cos(half)
        return pos, quat

    def angular_velocity_body(self, times: np.ndarray) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        w = np.zeros(times.shape + (3,))
        w[..., 2] = self._yaw(times, 1)
        return w

    def max_speed(self, samples: int = 2000) -> float:
        ts = np.linspace(self.t0, self.t1, samples)
        return float(np.linalg.norm(self.velocity(ts), axis=-1).max())


# ---------------------------------------------------------------------------
# Lidar rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LidarConfig:
    rings: int = 16
    azimuth_steps: int = 1800
    scan_period: float = 0.1
    max_range: float = 100.0
    vertical_fov_deg: tuple[float, float] = (-15.0, 15.0)


@dataclass(frozen=True)
class RenderTruth:
    """Hidden per-point ground truth kept next to a rendered scan."""

    world_points: np.ndarray
    sensor_positions: np.ndarray
    sensor_quats: np.ndarray


def _cast_rays(world: WorldModel, origins, dirs, times, max_range):
    """Nearest hit over all geometry. Returns (dist, dynamic_flag, intensity)."""
    n = origins.shape[0]
    best = np.full(n, np.inf)
    dynamic = np.zeros(n, dtype=bool)
    intensity = np.zeros(n)
    for box in world.static_boxes:
        d = _ray_box_hits(origins, dirs, box.lo, box.hi)
        closer = d < best
        best[closer] = d[closer]
        dynamic[closer] = False
        intensity[closer] = box.intensity
    for obj in world.moving_boxes:
        centers = obj.center_at(times)
        rot_inv = obj.rotation.inverse()
        o_loc = rot_inv.apply(origins - centers)
        d_loc = rot_inv.apply(dirs)
        half = 0.5 * obj.extent
        d = _ray_box_hits(o_loc, d_loc, -half, half)
        closer = d < best
        best[closer] = d[closer]
        dynamic[closer] = True
        intensity[closer] = obj.intensity
    best[best > max_range] = np.inf
    return best, dynamic, intensity


def _assemble_scan(cfg, az_flat, t_flat, dirs_flat, dist, dynamic, intens, requested_t_start):
    hit = np.isfinite(dist)
    if hit.sum() < 2:
        empty = np.zeros((0,))
        return LaserScan(
            positions=np.zeros((0, 3)), intensities=empty, azimuths=empty,
            timestamps=empty, t_start=requested_t_start, scan_period=cfg.scan_period,
            theta_end=TWO_PI, labels=np.zeros(0, dtype=np.uint8),
        ), hit
    positions = dirs_flat[hit] * dist[hit, None]
    az = az_flat[hit]
    ts = t_flat[hit]
    theta_end = float(az[-1] - az[0])
    return LaserScan(
        positions=positions,
        intensities=intens[hit],
        azimuths=az % TWO_PI,
        timestamps=ts,
        t_start=float(ts[0]),
        scan_period=float(ts[-1] - ts[0]),
        theta_end=theta_end if theta_end > 0 else TWO_PI,
        labels=dynamic[hit].astype(np.uint8),
    ), hit


def render_scan(
    world: WorldModel,
    profile: TrajectoryProfile,
    t_start: float,
    cfg: LidarConfig,
    return_truth: bool = False,
):
    """Render one revolution starting at t_start from the moving true sensor pose.

    Points are reported in the sensor frame of their own emission time (range
    times ray direction), which is what a real spinning lidar measures.
    """
    n_az, n_rings = cfg.azimuth_steps, cfg.rings
    az = np.arange(n_az) * (TWO_PI / n_az)
    col_times = t_start + cfg.scan_period * az / TWO_PI

    elev = np.radians(np.linspace(cfg.vertical_fov_deg[0], cfg.vertical_fov_deg[1], n_rings))
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(elev), np.sin(elev)
    # sensor-frame directions, azimuth-major ordering
    dirs_s = np.empty((n_az, n_rings, 3))
    dirs_s[..., 0] = ca[:, None] * ce[None, :]
    dirs_s[..., 1] = sa[:, None] * ce[None, :]
    dirs_s[..., 2] = se[None, :]

    pos, quat = profile.pose_arrays(col_times)
    dirs_w = quat_rotate(quat[:, None, :], dirs_s)
    origins = np.broadcast_to(pos[:, None, :], dirs_w.shape)

    flat = (n_az * n_rings, 3)
    ray_times = np.repeat(col_times, n_rings)
    dist, dynamic, intens = _cast_rays(
        world, origins.reshape(flat), dirs_w.reshape(flat), ray_times, cfg.max_range
    )
    az_flat = np.repeat(az, n_rings)
    scan, hit = _assemble_scan(
        cfg, az_flat, ray_times, dirs_s.reshape(flat), dist, dynamic, intens, t_start
    )
    if not return_truth:
        return scan
    world_points = origins.reshape(flat)[hit] + dirs_w.reshape(flat)[hit] * dist[hit, None]
    truth = RenderTruth(
        world_points=world_points,
        sensor_positions=np.repeat(pos, n_rings, axis=0)[hit],
        sensor_quats=np.repeat(quat, n_rings, axis=0)[hit],
    )
    return scan, truth


def render_scan_static(
    world: WorldModel,
    pose: Pose,
    t_start: float,
    cfg: LidarConfig,
    freeze_time: float | None = None,
):
    """Render a distortion-free scan from a single frozen pose.

    Moving objects are sampled at freeze_time (defaults to t_start); used as a
    reference for deskew checks.
    """
    n_az, n_rings = cfg.azimuth_steps, cfg.rings
    az = np.arange(n_az) * (TWO_PI / n_az)
    col_times = np.full(n_az, t_start if freeze_time is None else freeze_time)
    elev = np.radians(np.linspace(cfg.vertical_fov_deg[0], cfg.vertical_fov_deg[1], n_rings))
    dirs_s = np.empty((n_az, n_rings, 3))
    dirs_s[..., 0] = np.cos(az)[:, None] * np.cos(elev)[None, :]
    dirs_s[..., 1] = np.sin(az)[:, None] * np.cos(elev)[None, :]
    dirs_s[..., 2] = np.sin(elev)[None, :]

    flat = (n_az * n_rings, 3)
    dirs_w = pose.rotation.apply(dirs_s.reshape(flat))
    origins = np.broadcast_to(pose.translation, flat)
    ray_times = np.repeat(col_times, n_rings)
    dist, dynamic, intens = _cast_rays(world, origins, dirs_w, ray_times, cfg.max_range)
    az_flat = np.repeat(az, n_rings)
    scan, _ = _assemble_scan(cfg, az_flat, ray_times, dirs_s.reshape(flat), dist, dynamic, intens, t_start)
    return scan


# ---------------------------------------------------------------------------
# IMU synthesis
# ---------------------------------------------------------------------------

def synthesize_imu(
    profile: TrajectoryProfile,
    rate: float,
    accel_bias=np.zeros(3),
    gyro_bias=np.zeros(3),
    accel_noise_std=np.zeros(3),
    gyro_noise_std=np.zeros(3),
    seed: int = 0,
    gravity: float = DEFAULT_GRAVITY,
) -> ImuTrack:
    """Exact IMU measurements from the analytic trajectory plus bias and noise.

    accel = R^T (a_world - g_vec) + accel_bias + noise, gravity pointing -z.
    Deterministic for a given seed (accelerometer noise drawn before gyro).
    """
    if rate < 100.0:
        raise ValueError(f"IMU rate {rate} Hz below the 100 Hz minimum")
    dt = 1.0 / rate
    n = int(math.floor((profile.t1 - profile.t0) / dt)) + 1
    times = profile.t0 + dt * np.arange(n)

    a_world = np.atleast_2d(profile.acceleration(times))
    g_vec = np.array([0.0, 0.0, -gravity])
    _, quat = profile.pose_arrays(times)
    accel_body = quat_rotate(quat_conjugate(quat), a_world - g_vec)
    gyro_body = profile.angular_velocity_body(times)

    rng = np.random.default_rng(seed)
    accel = accel_body + np.asarray(accel_bias, dtype=float)
    gyro = gyro_body + np.asarray(gyro_bias, dtype=float)
    a_std = np.asarray(accel_noise_std, dtype=float)
    g_std = np.asarray(gyro_noise_std, dtype=float)
    if np.any(a_std > 0) or np.any(g_std > 0):
        accel = accel + rng.standard_normal((n, 3)) * a_std
        gyro = gyro + rng.standard_normal((n, 3)) * g_std
    return ImuTrack(times=times, accel=accel, gyro=gyro)


# ---------------------------------------------------------------------------
# Scene presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimScenario:
    name: str
    world: WorldModel
    profile: TrajectoryProfile
    lidar: LidarConfig
    imu_rate: float = 100.0
    accel_bias: np.ndarray = field(default_factory=lambda: np.array([0.05, -0.03, 0.02]))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.array([0.004, -0.003, 0.002]))
    accel_noise_std: np.ndarray = field(default_factory=lambda: np.full(3, 0.03))
    gyro_noise_std: np.ndarray = field(default_factory=lambda: np.full(3, 0.003))


def _highway_static_boxes(length: float) -> list[Box]:
    boxes = [
        # ground slab and two guardrails running the whole stretch
        Box(lo=(-30.0, -30.0, -0.4), hi=(length + 30.0, 30.0, 0.0), intensity=0.3),
        Box(lo=(-20.0, 7.9, 0.0), hi=(length + 20.0, 8.2, 0.9), intensity=0.5),
        Box(lo=(-20.0, -8.2, 0.0), hi=(length + 20.0, -7.9, 0.9), intensity=0.5),
    ]
    # lamp posts every 15 m, alternating sides: sparse vertical structure
    x = 0.0
    side = 1.0
    while x <= length + 20.0:
        y = 9.0 * side
        boxes.append(Box(lo=(x - 0.15, y - 0.15, 0.0), hi=(x + 0.15, y + 0.15, 5.0), intensity=0.6))
        side = -side
        x += 15.0
    # overhead gantries every 80 m (crossbar plus pillars)
    x = 40.0
    while x <= length + 10.0:
        boxes.append(Box(lo=(x - 0.2, -10.0, 5.5), hi=(x + 0.2, 10.0, 6.3), intensity=0.7))
        boxes.append(Box(lo=(x - 0.25, -10.4, 0.0), hi=(x + 0.25, -9.9, 5.6), intensity=0.7))
        boxes.append(Box(lo=(x - 0.25, 9.9, 0.0), hi=(x + 0.25, 10.4, 5.6), intensity=0.7))
        x += 80.0
    # occasional sound walls / buildings off the shoulder
    x = 20.0
    side = 1.0
    while x <= length:
        y_near = 14.0 * side
        y_far = y_near + 8.0 * side
        boxes.append(
            Box(
                lo=(x, min(y_near, y_far), 0.0),
                hi=(x + 25.0, max(y_near, y_far), 4.0),
                intensity=0.4,
            )
        )
        side = -side
        x += 70.0
    return boxes


def _highway_profile(length: float, peak_speed: float) -> TrajectoryProfile:
    """Accelerate, cruise near peak_speed with a gentle lane change, brake."""
    # speed plan at 1 s knots; integrate to distance to place waypoints
    speeds = [10.0, 13.0, peak_speed, peak_speed, 14.0, 12.0, 13.5, peak_speed - 1.0]
    ts, xs = [0.0], [0.0]
    x = 0.0
    t = 0.0
    i = 0
    while x < length:
        v = speeds[min(i, len(speeds) - 1)]
        i += 1
        t += 1.0
        x += v
        ts.append(t)
        xs.append(min(x, length) if x >= length else x)
    ts = np.asarray(ts)
    xs = np.asarray(xs)
    # gentle lane change mid-run, constant height
    ys = 1.5 * np.sin(np.clip((xs - 60.0) / max(length - 120.0, 1.0), 0.0, 1.0) * np.pi)
    zs = np.full_like(xs, 1.8)
    yaws = np.zeros_like(xs)
    yaws[1:-1] = np.arctan2(ys[2:] - ys[:-2], xs[2:] - xs[:-2])
    yaws[-1] = yaws[-2]
    return TrajectoryProfile.from_waypoints(ts, np.stack([xs, ys, zs], axis=1), yaws)


def _crossing_traffic(length: float, duration: float) -> list[MovingBox]:
    """Six car/bus sized boxes sweeping through the field of view."""
    car = np.array([4.5, 1.9, 1.5])
    bus = np.array([10.0, 2.6, 2.6])
    objs = []
    # floating 0.3 m above ground so their volumes never contain static points
    z_car = 0.3 + car[2] / 2.0
    z_bus = 0.3 + bus[2] / 2.0
    # two crossing perpendicular to the road
    for k, x in enumerate((45.0, 150.0)):
        t0, t1 = 0.15 * duration + 6.0 * k, 0.85 * duration
        objs.append(
            MovingBox(
                extent=car,
                track_times=np.array([t0, t1]),
                track_positions=np.array([[x, -35.0, z_car], [x, 35.0, z_car]]),
                rotation=Rotation.about_z(np.pi / 2.0),
            )
        )
    # two oncoming in the adjacent lane
    for k in range(2):
        t0 = 1.0 + 7.0 * k
        objs.append(
            MovingBox(
                extent=car,
                track_times=np.array([t0, t0 + duration]),
                track_positions=np.array(
                    [[length + 60.0 - 180.0 * k, -4.5, z_car], [length + 60.0 - 180.0 * k - 18.0 * duration, -4.5, z_car]]
                ),
            )
        )
    # one overtaking bus and one slower car ahead in the next lane
    objs.append(
        MovingBox(
            extent=bus,
            track_times=np.array([0.0, duration]),
            track_positions=np.array([[-25.0, 4.0, z_bus], [-25.0 + 22.0 * duration, 4.0, z_bus]]),
        )
    )
    objs.append(
        MovingBox(
            extent=car,
            track_times=np.array([0.0, duration]),
            track_positions=np.array([[25.0, 4.0, z_car], [25.0 + 9.0 * duration, 4.0, z_car]]),
        )
    )
    return objs


def make_scenario(
    name: str,
    length: float = 300.0,
    peak_speed: float = 16.7,
    azimuth_steps: int = 900,
) -> SimScenario:
    """Build a named preset scene; known names: static_highway, dynamic_highway."""
    profile = _highway_profile(length, peak_speed)
    static = _highway_static_boxes(length)
    duration = profile.t1 - profile.t0
    if name == "static_highway":
        world = WorldModel(static_boxes=tuple(static))
    elif name == "dynamic_highway":
        world = WorldModel(
            static_boxes=tuple(static),
            moving_boxes=tuple(_crossing_traffic(length, duration)),
        )
    else:
        raise ValueError(f"unknown world preset '{name}'")
    lidar = LidarConfig(rings=16, azimuth_steps=azimuth_steps, scan_period=0.1, max_range=80.0)
    return SimScenario(name=name, world=world, profile=profile, lidar=lidar)
