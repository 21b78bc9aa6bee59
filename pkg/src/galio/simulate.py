"""Synthetic world, trajectory and sensor simulation.

Trajectories are analytic, twice differentiable paths sampled at IMU rate.
Motion starts after an optional stationary hold and a smooth speed ramp
(quintic blend), so a static initializer always has clean data at the start.

IMU streams invert the measurement model exactly from the analytic
kinematics; LiDAR beams are cast from the continuously moving pose (each
azimuth step gets its own pose on the Galilean geodesic between truth
samples, which produces real skew). All randomness comes from counter-based
Philox streams keyed on (seed, stream id), so datasets are reproducible
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .liegroups import GalileanFrame, Pose3, Rot3, interpolate_frames, so3_exp
from .pipeline import LidarScan
from .sphere import SpherePoint
from .state import ImuSample, NoiseParams

STREAM_GYRO = 0
STREAM_ACCEL = 1
STREAM_BIAS_GYRO = 2
STREAM_BIAS_ACCEL = 3
STREAM_LIDAR = 4

MAX_ANGULAR_RATE = 10.0
MAX_ACCEL = 50.0


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent deterministic stream from one 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


# ---------------------------------------------------------------------------
# world geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Patch:
    """Rectangular planar patch: corner plus two orthogonal edge vectors."""

    corner: np.ndarray
    edge1: np.ndarray
    edge2: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.corner, dtype=float)
        e1 = np.asarray(self.edge1, dtype=float)
        e2 = np.asarray(self.edge2, dtype=float)
        if np.linalg.norm(np.cross(e1, e2)) < 1e-12:
            raise ValueError("degenerate patch")
        object.__setattr__(self, "corner", c)
        object.__setattr__(self, "edge1", e1)
        object.__setattr__(self, "edge2", e2)


@dataclass
class World:
    patches: list = field(default_factory=list)

    def add_patch(self, corner, edge1, edge2):
        self.patches.append(Patch(corner, edge1, edge2))

    def add_box(self, center, size):
        """Axis-aligned box contributed as six rectangular patches."""
        c = np.asarray(center, dtype=float)
        s = np.asarray(size, dtype=float) / 2.0
        lo, hi = c - s, c + s
        dx = np.array([hi[0] - lo[0], 0, 0])
        dy = np.array([0, hi[1] - lo[1], 0])
        dz = np.array([0, 0, hi[2] - lo[2]])
        self.add_patch(lo, dx, dy)                      # floor
        self.add_patch(lo + dz, dx, dy)                 # ceiling
        self.add_patch(lo, dx, dz)                      # y = lo
        self.add_patch(lo + dy, dx, dz)                 # y = hi
        self.add_patch(lo, dy, dz)                      # x = lo
        self.add_patch(lo + dx, dy, dz)                 # x = hi

    def arrays(self):
        corners = np.array([p.corner for p in self.patches])
        e1 = np.array([p.edge1 for p in self.patches])
        e2 = np.array([p.edge2 for p in self.patches])
        normals = np.cross(e1, e2)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return corners, e1, e2, normals


def box_world(size=(24.0, 24.0, 8.0), center=(0.0, 0.0, 2.0)) -> World:
    w = World()
    w.add_box(center, size)
    return w


def corridor_world(length=40.0, width=4.0, height=3.0, x0=-5.0) -> World:
    """Corridor along +x: side walls, floor and ceiling, no end caps, so the
    along-track direction is unconstrained for a plane-based registration."""
    w = World()
    dx = np.array([length, 0, 0])
    dz = np.array([0, 0, height])
    dy = np.array([0, width, 0])
    lo = np.array([x0, -width / 2.0, 0.0])
    w.add_patch(lo, dx, dz)                 # y = -width/2
    w.add_patch(lo + dy, dx, dz)            # y = +width/2
    w.add_patch(lo, dx, dy)                 # floor
    w.add_patch(lo + dz, dx, dy)            # ceiling
    return w


# ---------------------------------------------------------------------------
# trajectory profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajectoryProfile:
    kind: str = "static"
    duration: float = 10.0
    speed: float = 1.0
    hold: float = 0.0
    ramp: float = 0.0
    height: float = 1.5
    vertical_wobble: float = 0.0

    def __post_init__(self):
        if self.kind not in ("static", "constant-velocity", "figure-eight", "corridor-transit"):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.duration <= 0 or self.hold < 0 or self.ramp < 0:
            raise ValueError("invalid profile timing")


@dataclass
class Trajectory:
    """Ground truth sampled at IMU rate: poses, velocities and body rates."""

    stamps: np.ndarray
    rotations: np.ndarray   # (N,3,3)
    positions: np.ndarray   # (N,3)
    velocities: np.ndarray  # (N,3)
    body_gyro: np.ndarray   # (N,3) true angular rate in body frame
    body_accel: np.ndarray  # (N,3) true linear acceleration in body frame

    def __len__(self):
        return self.stamps.shape[0]

    def frame(self, i: int) -> GalileanFrame:
        return GalileanFrame(
            Rot3(self.rotations[i].copy()),
            self.velocities[i].copy(),
            self.positions[i].copy(),
            float(self.stamps[i]),
        )

    def frames(self):
        return [(float(self.stamps[i]), self.frame(i)) for i in range(len(self))]


def _time_warp(t: np.ndarray, hold: float, ramp: float):
    """sigma(t), sigma'(t), sigma''(t) for the hold+quintic-ramp warp."""
    sigma = np.zeros_like(t)
    d1 = np.zeros_like(t)
    d2 = np.zeros_like(t)
    if ramp > 0:
        u = np.clip((t - hold) / ramp, 0.0, 1.0)
        w = 10 * u**3 - 15 * u**4 + 6 * u**5
        wp = (30 * u**2 - 60 * u**3 + 30 * u**4) / ramp
        in_ramp = (t >= hold) & (t < hold + ramp)
        after = t >= hold + ramp
        s_ramp = ramp * (2.5 * u**4 - 3 * u**5 + u**6)
        sigma = np.where(in_ramp, s_ramp, sigma)
        d1 = np.where(in_ramp, w, d1)
        d2 = np.where(in_ramp, wp, d2)
        sigma = np.where(after, 0.5 * ramp + (t - hold - ramp), sigma)
        d1 = np.where(after, 1.0, d1)
    else:
        after = t >= hold
        sigma = np.where(after, t - hold, sigma)
        d1 = np.where(after, 1.0, d1)
    return sigma, d1, d2


def gen_trajectory(profile: TrajectoryProfile, imu_rate: float = 200.0) -> Trajectory:
    """Ground-truth path at IMU rate; raises on rate-bound violation."""
    dt = 1.0 / imu_rate
    n = int(round(profile.duration * imu_rate)) + 1
    t = np.arange(n) * dt
    sigma, sd1, sd2 = _time_warp(t, profile.hold, profile.ramp)
    h = profile.height
    kind = profile.kind

    if kind == "static":
        p = np.tile(np.array([0.0, 0.0, h]), (n, 1))
        v = np.zeros((n, 3))
        a = np.zeros((n, 3))
        yaw = np.zeros(n)
        yaw_d = np.zeros(n)
    elif kind in ("constant-velocity", "corridor-transit"):
        direction = np.array([1.0, 0.0, 0.0])
        p = np.array([0.0, 0.0, h]) + np.outer(sigma * profile.speed, direction)
        v = np.outer(sd1 * profile.speed, direction)
        a = np.outer(sd2 * profile.speed, direction)
        yaw = np.zeros(n)
        yaw_d = np.zeros(n)
    else:  # figure-eight
        T = max(profile.duration - profile.hold - 0.5 * profile.ramp, 1.0)
        w1 = 2.0 * np.pi / T
        A = profile.speed / w1
        B = A / 2.0
        C = profile.vertical_wobble
        s = sigma
        px = A * np.sin(w1 * s)
        py = B * np.sin(2 * w1 * s)
        pz = h + C * np.sin(2 * w1 * s)
        dpx = A * w1 * np.cos(w1 * s)
        dpy = 2 * B * w1 * np.cos(2 * w1 * s)
        dpz = 2 * C * w1 * np.cos(2 * w1 * s)
        ddpx = -A * w1**2 * np.sin(w1 * s)
        ddpy = -4 * B * w1**2 * np.sin(2 * w1 * s)
        ddpz = -4 * C * w1**2 * np.sin(2 * w1 * s)
        p = np.stack([px, py, pz], axis=1)
        v = np.stack([dpx * sd1, dpy * sd1, dpz * sd1], axis=1)
        a = np.stack(
            [ddpx * sd1**2 + dpx * sd2, ddpy * sd1**2 + dpy * sd2, ddpz * sd1**2 + dpz * sd2],
            axis=1,
        )
        # tangent-following yaw in the path parameter (defined even at rest)
        yaw = np.arctan2(dpy, dpx)
        denom = dpx**2 + dpy**2
        yaw_ds = (dpx * ddpy - dpy * ddpx) / np.maximum(denom, 1e-12)
        yaw_d = yaw_ds * sd1

    cy, sy = np.cos(yaw), np.sin(yaw)
    R = np.zeros((n, 3, 3))
    R[:, 0, 0], R[:, 0, 1] = cy, -sy
    R[:, 1, 0], R[:, 1, 1] = sy, cy
    R[:, 2, 2] = 1.0
    body_gyro = np.zeros((n, 3))
    body_gyro[:, 2] = yaw_d  # yaw-only rotation: body and world z rates agree
    body_accel = np.einsum("nji,nj->ni", R, a)

    if np.abs(body_gyro).max() >= MAX_ANGULAR_RATE:
        raise ValueError("angular rate bound violated")
    if np.linalg.norm(a, axis=1).max() >= MAX_ACCEL:
        raise ValueError("acceleration bound violated")
    return Trajectory(t, R, p, v, body_gyro, body_accel)


# ---------------------------------------------------------------------------
# IMU simulation
# ---------------------------------------------------------------------------


def sim_imu(
    traj: Trajectory,
    noise: NoiseParams,
    gyro_bias,
    accel_bias,
    gravity: SpherePoint,
    seed: int = 0,
    bias_walk: bool = True,
) -> list:
    """Invert the IMU measurement model from ground-truth kinematics.

    Per-sample noise standard deviation is density / sqrt(dt); bias random
    walks integrate density * sqrt(dt) increments.
    """
    n = len(traj)
    dt = float(traj.stamps[1] - traj.stamps[0]) if n > 1 else 1.0
    sq = 1.0 / np.sqrt(dt)
    g = gravity.vector
    rg = stream_rng(seed, STREAM_GYRO)
    ra = stream_rng(seed, STREAM_ACCEL)
    n_gyro = rg.normal(0.0, noise.gyro_noise_density * sq, (n, 3)) if noise.gyro_noise_density else np.zeros((n, 3))
    n_accel = ra.normal(0.0, noise.accel_noise_density * sq, (n, 3)) if noise.accel_noise_density else np.zeros((n, 3))

    bg = np.tile(np.asarray(gyro_bias, dtype=float), (n, 1))
    ba = np.tile(np.asarray(accel_bias, dtype=float), (n, 1))
    if bias_walk:
        if noise.gyro_bias_walk:
            steps = stream_rng(seed, STREAM_BIAS_GYRO).normal(0.0, noise.gyro_bias_walk * np.sqrt(dt), (n, 3))
            steps[0] = 0.0
            bg = bg + np.cumsum(steps, axis=0)
        if noise.accel_bias_walk:
            steps = stream_rng(seed, STREAM_BIAS_ACCEL).normal(0.0, noise.accel_bias_walk * np.sqrt(dt), (n, 3))
            steps[0] = 0.0
            ba = ba + np.cumsum(steps, axis=0)

    grav_body = np.einsum("nji,nj->ni", traj.rotations, np.tile(g, (n, 1)))
    gyro = traj.body_gyro + bg + n_gyro
    accel = traj.body_accel + ba + n_accel - grav_body
    return [ImuSample(float(traj.stamps[i]), gyro[i], accel[i]) for i in range(n)]


def true_biases(traj: Trajectory, noise: NoiseParams, gyro_bias, accel_bias, seed: int, bias_walk: bool = True):
    """Replay the bias walks used by sim_imu (for consistency evaluation)."""
    n = len(traj)
    dt = float(traj.stamps[1] - traj.stamps[0]) if n > 1 else 1.0
    bg = np.tile(np.asarray(gyro_bias, dtype=float), (n, 1))
    ba = np.tile(np.asarray(accel_bias, dtype=float), (n, 1))
    if bias_walk:
        if noise.gyro_bias_walk:
            steps = stream_rng(seed, STREAM_BIAS_GYRO).normal(0.0, noise.gyro_bias_walk * np.sqrt(dt), (n, 3))
            steps[0] = 0.0
            bg = bg + np.cumsum(steps, axis=0)
        if noise.accel_bias_walk:
            steps = stream_rng(seed, STREAM_BIAS_ACCEL).normal(0.0, noise.accel_bias_walk * np.sqrt(dt), (n, 3))
            steps[0] = 0.0
            ba = ba + np.cumsum(steps, axis=0)
    return bg, ba


# ---------------------------------------------------------------------------
# LiDAR simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LidarModel:
    channels: int = 12
    azimuth_steps: int = 180
    fov_vertical_deg: float = 30.0
    max_range: float = 80.0
    min_range: float = 0.1
    range_noise: float = 0.02
    rate: float = 10.0


def _ray_cast(origins, dirs, world_arrays, min_range, max_range):
    """Batch ray-vs-patch: first hit range per ray, nan for misses."""
    corners, e1, e2, normals = world_arrays
    denom = dirs @ normals.T                     # (B,P)
    num = np.einsum("pj,bpj->bp", normals, corners[None, :, :] - origins[:, None, :])
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = num / denom
        q = origins[:, None, :] + lam[..., None] * dirs[:, None, :] - corners[None, :, :]
        l1 = np.einsum("pj,pj->p", e1, e1)
        l2 = np.einsum("pj,pj->p", e2, e2)
        s = np.einsum("bpj,pj->bp", q, e1) / l1
        u = np.einsum("bpj,pj->bp", q, e2) / l2
    ok = (
        np.isfinite(lam)
        & (lam > min_range)
        & (lam < max_range)
        & (s >= 0.0) & (s <= 1.0)
        & (u >= 0.0) & (u <= 1.0)
        & (np.abs(denom) > 1e-12)
    )
    lam = np.where(ok, lam, np.inf)
    best = lam.min(axis=1)
    return np.where(np.isfinite(best), best, np.nan)


def sim_lidar(
    world: World,
    traj: Trajectory,
    model: LidarModel,
    extrinsic: Pose3,
    seed: int = 0,
) -> list:
    """Simulated spinning LiDAR: one revolution per scan period, per-azimuth
    firing times, rays cast from the interpolated true pose."""
    world_arrays = world.arrays()
    period = 1.0 / model.rate
    t_end = float(traj.stamps[-1])
    n_scans = int(np.floor((t_end - period) / period + 1e-9)) + 1
    elev = np.deg2rad(np.linspace(-model.fov_vertical_deg / 2, model.fov_vertical_deg / 2, model.channels))
    rng = stream_rng(seed, STREAM_LIDAR)
    R_L, p_L = extrinsic.rotation.matrix, extrinsic.translation

    scans = []
    stamps = traj.stamps
    for si in range(n_scans):
        start = si * period
        az_frac = np.arange(model.azimuth_steps) / model.azimuth_steps
        offsets = az_frac * period
        fire = start + offsets
        # bracket each azimuth time in the truth sampling and interpolate
        R_b = np.empty((model.azimuth_steps, 3, 3))
        p_b = np.empty((model.azimuth_steps, 3))
        seg = np.clip(np.searchsorted(stamps, fire, side="right") - 1, 0, len(stamps) - 2)
        for j in np.unique(seg):
            selm = seg == j
            s = (fire[selm] - stamps[j]) / (stamps[j + 1] - stamps[j])
            R_b[selm], p_b[selm] = interpolate_frames(traj.frame(j), traj.frame(j + 1), s)

        az = 2.0 * np.pi * az_frac
        # beam directions per (azimuth, channel) in the LiDAR frame
        ca, sa = np.cos(az), np.sin(az)
        ce, se = np.cos(elev), np.sin(elev)
        d_lidar = np.empty((model.azimuth_steps, model.channels, 3))
        d_lidar[:, :, 0] = ca[:, None] * ce[None, :]
        d_lidar[:, :, 1] = sa[:, None] * ce[None, :]
        d_lidar[:, :, 2] = se[None, :]

        R_w = R_b @ R_L                                        # (A,3,3)
        o_w = np.einsum("aij,j->ai", R_b, p_L) + p_b           # (A,3)
        d_w = np.einsum("aij,acj->aci", R_w, d_lidar)

        B = model.azimuth_steps * model.channels
        origins = np.repeat(o_w, model.channels, axis=0)
        dirs = d_w.reshape(B, 3)
        rng_hits = _ray_cast(origins, dirs, world_arrays, model.min_range, model.max_range)
        hit = np.isfinite(rng_hits)
        if model.range_noise > 0:
            noise = rng.normal(0.0, model.range_noise, B)
        else:
            noise = np.zeros(B)
        ranges = rng_hits + noise
        pts = d_lidar.reshape(B, 3) * ranges[:, None]
        offs = np.repeat(offsets, model.channels)
        scans.append(LidarScan(start, pts[hit], offs[hit]))
    return scans
