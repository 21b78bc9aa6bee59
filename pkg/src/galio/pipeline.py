"""Scan processing: IMU-window propagation with per-point deskewing, plane
correspondence extraction, point-to-plane residuals feeding the iterated
update, and map insertion.

Deskewing interpolates the pose for every point timestamp along the Galilean
geodesic between the bracketing propagated poses and re-expresses the point
in the scan-end LiDAR frame, so the measurement model can keep applying the
full extrinsic chain to raw LiDAR-frame points.

Measurement Jacobian rows follow the chain rule through the right increment;
in particular the time column carries u^T v (position responds to a time
shift through the frame velocity) and the extrinsic columns carry the world
rotation. Both were pinned by finite-difference checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .ieskf import (
    FilterState,
    MeasurementBatch,
    UpdateReport,
    iterated_update,
    predict,
)
from .liegroups import (
    GalileanFrame,
    Pose3,
    Rot3,
    _so3_exp_batch,
    interpolate_frames,
    so3_exp,
    so3_log,
    sgal3_project_se3,
)
from .octree import IOctree
from .sphere import SpherePoint
from .state import (
    BA,
    BG,
    DECOUPLED,
    DIM_ERROR,
    EXTR_RHO,
    EXTR_THETA,
    GRAV,
    IOTA,
    NU,
    RHO,
    SGAL3,
    THETA,
    ImuSample,
    NavState,
)


@dataclass(frozen=True)
class LidarScan:
    """One scan: start time plus per-point positions (LiDAR frame), offsets
    from the start (s) and optional intensities."""

    start_stamp: float
    points: np.ndarray
    offsets: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=float).reshape(-1))
        if self.points.shape[0] != self.offsets.shape[0]:
            raise ValueError("points and offsets disagree in length")

    def __len__(self):
        return self.points.shape[0]

    @property
    def end_stamp(self) -> float:
        return self.start_stamp + (float(self.offsets.max()) if len(self) else 0.0)


@dataclass
class PoseWindow:
    """Propagated poses spanning one scan interval (stamps strictly increasing)."""

    stamps: list = field(default_factory=list)
    frames: list = field(default_factory=list)

    def append(self, stamp: float, frame: GalileanFrame):
        if self.stamps and stamp <= self.stamps[-1]:
            raise ValueError("window stamps must be strictly increasing")
        self.stamps.append(stamp)
        self.frames.append(frame)


@dataclass(frozen=True)
class PlaneFit:
    normal: np.ndarray
    point: np.ndarray
    valid: bool
    residual: float


@dataclass(frozen=True)
class ResidualStats:
    total: int
    valid: int


@dataclass
class FrameReport:
    stamp: float
    t_predict_us: float = 0.0
    t_deskew_us: float = 0.0
    t_downsample_us: float = 0.0
    t_update_us: float = 0.0
    t_insert_us: float = 0.0
    iterations: int = 0
    valid_ratio: float = 0.0
    map_size: int = 0
    degenerate: bool = False
    imu_gap: bool = False
    dropped_points: int = 0
    cond_min: float = np.nan
    cond_max: float = np.nan


# ---------------------------------------------------------------------------
# deskewing
# ---------------------------------------------------------------------------


def _interp_window(window: PoseWindow, stamps: np.ndarray, mode: str):
    """Batched pose interpolation at the given absolute stamps.
    Returns rotations (N,3,3) and positions (N,3) of the body frame."""
    ws = np.asarray(window.stamps)
    N = stamps.shape[0]
    R = np.empty((N, 3, 3))
    p = np.empty((N, 3))
    seg = np.clip(np.searchsorted(ws, stamps, side="right") - 1, 0, len(ws) - 2)
    for j in np.unique(seg):
        sel = seg == j
        ga, gb = window.frames[j], window.frames[j + 1]
        s = (stamps[sel] - ws[j]) / (ws[j + 1] - ws[j])
        if mode == SGAL3:
            R[sel], p[sel] = interpolate_frames(ga, gb, s)
        else:
            theta = so3_log(ga.rotation.inverse().compose(gb.rotation))
            R[sel] = ga.rotation.matrix @ _so3_exp_batch(s[:, None] * theta[None, :])
            p[sel] = ga.position + s[:, None] * (gb.position - ga.position)
    return R, p


def deskew(scan: LidarScan, window: PoseWindow, extrinsic: Pose3, mode: str = SGAL3):
    """Motion-compensate a scan into the scan-end LiDAR frame.

    Points whose stamps fall outside the window are dropped and counted.
    """
    if len(window.stamps) < 2:
        raise ValueError("pose window needs at least two poses")
    stamps = scan.start_stamp + scan.offsets
    tol = 1e-9
    ok = (stamps >= window.stamps[0] - tol) & (stamps <= window.stamps[-1] + tol)
    dropped = int((~ok).sum())
    pts = scan.points[ok]
    if pts.shape[0] == 0:
        return np.zeros((0, 3)), dropped
    R_i, p_i = _interp_window(window, np.clip(stamps[ok], window.stamps[0], window.stamps[-1]), mode)
    R_L, p_L = extrinsic.rotation.matrix, extrinsic.translation
    body = pts @ R_L.T + p_L
    world = np.einsum("nij,nj->ni", R_i, body) + p_i
    end = window.frames[-1]
    R_e = end.rotation.matrix @ R_L
    p_e = end.rotation.matrix @ p_L + end.position
    return (world - p_e) @ R_e, dropped


# ---------------------------------------------------------------------------
# downsampling and plane fitting
# ---------------------------------------------------------------------------


def voxel_downsample(cloud: np.ndarray, leaf: float) -> np.ndarray:
    """Keep the first point (by ordinal) of every occupied voxel."""
    if leaf <= 0:
        raise ValueError("leaf must be positive")
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if cloud.shape[0] == 0:
        return cloud
    keys = np.floor(cloud / leaf).astype(np.int64)
    n = keys.shape[0]
    order = np.lexsort((np.arange(n), keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    starts = np.r_[True, np.any(sk[1:] != sk[:-1], axis=1)]
    return cloud[np.sort(order[starts])]


def _fit_planes_batch(neigh: np.ndarray):
    """Least-squares planes for (N,k,3) neighborhoods via the smallest
    eigenvector of the scatter matrix. Returns (normals, centroids,
    max_abs_residuals, rank_ok)."""
    centroid = neigh.mean(axis=1)
    Y = neigh - centroid[:, None, :]
    S = np.einsum("nki,nkj->nij", Y, Y)
    lam, vec = np.linalg.eigh(S)
    normals = vec[:, :, 0]
    # deterministic sign: largest-magnitude component positive
    idx = np.argmax(np.abs(normals), axis=1)
    signs = np.sign(normals[np.arange(normals.shape[0]), idx])
    signs[signs == 0] = 1.0
    normals = normals * signs[:, None]
    resid = np.abs(np.einsum("nki,ni->nk", Y, normals)).max(axis=1)
    scale = np.maximum(lam[:, 2], 1e-30)
    rank_ok = lam[:, 1] > 1e-9 * scale
    return normals, centroid, resid, rank_ok


def fit_plane(neighbors, plane_tolerance: float = 0.1, query=None,
              max_neighbor_distance: float | None = None) -> PlaneFit:
    """Fit one local plane; valid iff every neighbor sits within
    plane_tolerance of it (and, when a query is given, the farthest neighbor
    is within max_neighbor_distance of the query)."""
    pts = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise ValueError("plane fit needs at least 3 points")
    normals, centroid, resid, rank_ok = _fit_planes_batch(pts[None])
    valid = bool(rank_ok[0]) and float(resid[0]) < plane_tolerance
    if valid and query is not None and max_neighbor_distance is not None:
        far = float(np.linalg.norm(pts - np.asarray(query, dtype=float), axis=1).max())
        valid = far < max_neighbor_distance
    return PlaneFit(normals[0], centroid[0], valid, float(resid[0]))


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


def point_residual(x: NavState, p, fit: PlaneFit, mode: str = SGAL3):
    """Signed point-to-plane distance and its 24-column Jacobian row for one
    LiDAR-frame point."""
    p = np.asarray(p, dtype=float)
    R = x.gamma.rotation.matrix
    R_L, p_L = x.extrinsic.rotation.matrix, x.extrinsic.translation
    u = fit.normal
    b = R_L @ p + p_L
    world = R @ b + x.gamma.position
    z = float(u @ (world - fit.point))
    H = np.zeros(DIM_ERROR)
    w = R.T @ u
    H[RHO] = u if mode == DECOUPLED else w
    H[THETA] = np.cross(b, w)  # row form of -u^T R [b]x
    if mode == SGAL3:
        H[IOTA] = float(u @ x.gamma.velocity)
    u2 = R_L.T @ w
    H[EXTR_RHO] = u2
    H[EXTR_THETA] = np.cross(p, u2)
    return z, H


def build_residuals(x: NavState, cloud: np.ndarray, tree: IOctree, cfg: Config,
                    mode: str = SGAL3):
    """Point-to-plane residual batch for a candidate state against the map.

    Returns (MeasurementBatch or None, ResidualStats).
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    M = cloud.shape[0]
    if M == 0 or tree.point_count == 0:
        return None, ResidualStats(M, 0)
    R = x.gamma.rotation.matrix
    R_L, p_L = x.extrinsic.rotation.matrix, x.extrinsic.translation
    body = cloud @ R_L.T + p_L
    world = body @ R.T + x.gamma.position

    k = cfg.knn_k
    ords, d2, counts = tree.knn_arrays(world, k)
    full = counts == k
    if not np.any(full):
        return None, ResidualStats(M, 0)
    sel = np.flatnonzero(full)
    neigh = tree.positions_of(ords[sel].reshape(-1)).reshape(-1, k, 3)
    normals, centroids, resid, rank_ok = _fit_planes_batch(neigh)
    near = np.sqrt(d2[sel, k - 1]) < cfg.max_neighbor_distance
    good = rank_ok & (resid < cfg.plane_tolerance) & near
    sel = sel[good]
    if sel.size == 0:
        return None, ResidualStats(M, 0)
    u = normals[good]
    q = centroids[good]
    pw = world[sel]
    pb = body[sel]
    pl = cloud[sel]

    z = np.einsum("ni,ni->n", u, pw - q)
    H = np.zeros((sel.size, DIM_ERROR))
    w = u @ R  # rows are u^T R
    H[:, RHO] = u if mode == DECOUPLED else w
    H[:, THETA] = np.cross(pb, w)
    if mode == SGAL3:
        H[:, IOTA] = u @ x.gamma.velocity
    u2 = w @ R_L
    H[:, EXTR_RHO] = u2
    H[:, EXTR_THETA] = np.cross(pl, u2)
    batch = MeasurementBatch(z, H, np.full(sel.size, cfg.sigma_lidar**2))
    return batch, ResidualStats(M, sel.size)


def degeneracy_metrics(H: np.ndarray):
    """Smallest/largest singular values (and the weakest direction) of H^T H
    restricted to the translation+rotation tangent columns."""
    cols = np.r_[0:3, 6:9]
    G = H[:, cols].T @ H[:, cols]
    vals, vecs = np.linalg.eigh(G)
    sv = np.sqrt(np.maximum(vals, 0.0))
    return float(sv[0]), float(sv[-1]), vecs[:, 0]


# ---------------------------------------------------------------------------
# static initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StaticInit:
    attitude: Rot3
    gravity: SpherePoint
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    covariance: np.ndarray


class InitializationError(RuntimeError):
    pass


def static_initialize(samples: list, cfg: Config) -> StaticInit:
    """Estimate gravity direction, biases and starting attitude from a
    stationary window; refuses when acceleration variance suggests motion."""
    if len(samples) < 2:
        raise InitializationError("need at least two IMU samples")
    span = samples[-1].stamp - samples[0].stamp
    if span < 0.5:
        raise InitializationError(f"stationary window too short ({span:.2f} s)")
    gyro = np.array([s.gyro for s in samples])
    accel = np.array([s.accel for s in samples])
    if float(np.linalg.norm(accel.std(axis=0))) > cfg.init_motion_gate:
        raise InitializationError("motion detected during static initialization")

    g_mag = cfg.gravity_radius
    gyro_bias = gyro.mean(axis=0)
    a_mean = accel.mean(axis=0)
    a_norm = float(np.linalg.norm(a_mean))
    if a_norm < 1e-6:
        raise InitializationError("mean specific force vanishes")
    up = a_mean / a_norm
    e3 = np.array([0.0, 0.0, 1.0])
    c = np.cross(up, e3)
    cn = float(np.linalg.norm(c))
    if cn < 1e-12:
        R0 = np.eye(3) if up @ e3 > 0 else so3_exp(np.array([np.pi, 0.0, 0.0])).matrix
    else:
        R0 = so3_exp((c / cn) * np.arctan2(cn, float(up @ e3))).matrix
    gravity = SpherePoint(np.array([0.0, 0.0, -g_mag]), g_mag)
    # the residual specific force after alignment is the observable bias part
    accel_bias = a_mean + R0.T @ gravity.vector

    n = len(samples)
    dt = span / (n - 1)
    var_gyro_mean = cfg.gyro_noise_density**2 / max(span, dt)
    var_accel_mean = cfg.accel_noise_density**2 / max(span, dt)
    tilt_var = var_accel_mean / g_mag**2 + (2.0 * float(np.linalg.norm(cfg.sim_accel_bias)) / g_mag) ** 2

    P = np.zeros((DIM_ERROR, DIM_ERROR))
    P[RHO, RHO] = np.eye(3) * 1e-10
    P[NU, NU] = np.eye(3) * 1e-6
    P[THETA, THETA] = np.eye(3) * tilt_var
    P[8, 8] = 1e-10  # yaw is gauge-fixed by the first scan
    P[10:16, 10:16] = np.eye(6) * cfg.extrinsic_init_variance
    P[BG, BG] = np.eye(3) * (var_gyro_mean + (0.5 * float(np.linalg.norm(cfg.sim_gyro_bias))) ** 2)
    P[BA, BA] = np.eye(3) * (var_accel_mean + (2.0 * float(np.linalg.norm(cfg.sim_accel_bias))) ** 2)
    P[GRAV, GRAV] = np.eye(2) * 1e-8
    return StaticInit(Rot3(R0), gravity, gyro_bias, accel_bias, P)


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------


class LioPipeline:
    """Drives the filter scan by scan. Single-threaded by contract; the map
    is only written after the update completes."""

    def __init__(self, cfg: Config):
        self.cfg = cfg
        self.mode = cfg.propagation
        if self.mode not in (SGAL3, DECOUPLED):
            raise ValueError(f"unknown propagation mode {cfg.propagation!r}")
        self.tree = IOctree(cfg.octree_params())
        self.fs: FilterState | None = None
        self.last_imu: ImuSample | None = None
        self.trajectory: list = []
        self.reports: list = []
        self.noise = cfg.noise_params()

    def initialize_static(self, samples: list):
        init = static_initialize(samples, self.cfg)
        nav = NavState(
            GalileanFrame(init.attitude, np.zeros(3), np.zeros(3), 0.0),
            self.cfg.extrinsic(),
            init.gyro_bias,
            init.accel_bias,
            init.gravity,
        )
        self.fs = FilterState(nav, init.covariance, samples[-1].stamp)
        self.last_imu = samples[-1]
        return self.fs

    def start_at(self, fs: FilterState, last_imu: ImuSample | None = None):
        """Begin from a known state (used by tests and the simulator loop)."""
        self.fs = fs
        self.last_imu = last_imu

    def _propagate(self, imu_samples: list, until: float, window: PoseWindow) -> bool:
        gap = False
        window.append(self.fs.stamp, self.fs.nominal.gamma)
        for u in imu_samples:
            if u.stamp > until + 1e-9:
                break
            dt = u.stamp - self.fs.stamp
            if dt <= 1e-12:
                self.last_imu = u
                continue
            if dt > self.cfg.max_imu_gap:
                gap = True
            held = self.last_imu if self.last_imu is not None else u
            self.fs = predict(self.fs, held, dt, self.noise, self.mode)
            window.append(self.fs.stamp, self.fs.nominal.gamma)
            self.last_imu = u
        if until - self.fs.stamp > 1e-9:
            dt = until - self.fs.stamp
            if dt > self.cfg.max_imu_gap:
                gap = True
            held = self.last_imu if self.last_imu is not None else ImuSample(until, np.zeros(3), np.zeros(3))
            self.fs = predict(self.fs, held, dt, self.noise, self.mode)
            window.append(self.fs.stamp, self.fs.nominal.gamma)
        return gap

    def process_scan(self, scan: LidarScan, imu_samples: list) -> FrameReport:
        if self.fs is None:
            raise RuntimeError("pipeline not initialized")
        cfg = self.cfg
        report = FrameReport(stamp=scan.end_stamp)
        window = PoseWindow()

        t0 = time.perf_counter()
        report.imu_gap = self._propagate(imu_samples, scan.end_stamp, window)
        report.t_predict_us = (time.perf_counter() - t0) * 1e6

        if not cfg.update_enabled:
            self.trajectory.append((self.fs.stamp, self.fs.nominal.gamma))
            report.map_size = self.tree.point_count
            self.reports.append(report)
            return report

        t0 = time.perf_counter()
        cloud, report.dropped_points = deskew(scan, window, self.fs.nominal.extrinsic, self.mode)
        report.t_deskew_us = (time.perf_counter() - t0) * 1e6

        t0 = time.perf_counter()
        ds = voxel_downsample(cloud, cfg.voxel_leaf)
        report.t_downsample_us = (time.perf_counter() - t0) * 1e6

        degenerate = False
        if self.tree.point_count > 0:
            stats_box = []

            def provider(nav):
                batch, stats = build_residuals(nav, ds, self.tree, cfg, self.mode)
                stats_box.append((batch, stats))
                return batch

            t0 = time.perf_counter()
            self.fs, upd = iterated_update(
                self.fs, provider, cfg.eps_update, cfg.max_update_iterations, self.mode
            )
            report.t_update_us = (time.perf_counter() - t0) * 1e6
            report.iterations = upd.iterations
            degenerate = upd.degenerate
            report.degenerate = degenerate
            last_batch, last_stats = stats_box[-1]
            if last_stats.total:
                report.valid_ratio = last_stats.valid / last_stats.total
            if last_batch is not None:
                report.cond_min, report.cond_max, _ = degeneracy_metrics(last_batch.jacobian)
            self.last_batch = last_batch

        if not degenerate or cfg.insert_on_degenerate:
            t0 = time.perf_counter()
            nav = self.fs.nominal
            R = nav.gamma.rotation.matrix
            body = ds @ nav.extrinsic.rotation.matrix.T + nav.extrinsic.translation
            world = body @ R.T + nav.gamma.position
            self.tree.insert(world)
            report.t_insert_us = (time.perf_counter() - t0) * 1e6

        report.map_size = self.tree.point_count
        self.trajectory.append((self.fs.stamp, self.fs.nominal.gamma))
        self.reports.append(report)
        return report


def write_frame_reports(reports: list, path) -> None:
    cols = [
        "stamp", "t_predict_us", "t_deskew_us", "t_downsample_us", "t_update_us",
        "t_insert_us", "iterations", "valid_ratio", "map_size", "degenerate",
        "imu_gap", "dropped_points", "cond_min", "cond_max",
    ]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in reports:
            f.write(
                f"{r.stamp!r},{r.t_predict_us:.1f},{r.t_deskew_us:.1f},"
                f"{r.t_downsample_us:.1f},{r.t_update_us:.1f},{r.t_insert_us:.1f},"
                f"{r.iterations},{r.valid_ratio:.4f},{r.map_size},"
                f"{int(r.degenerate)},{int(r.imu_gap)},{r.dropped_points},"
                f"{r.cond_min!r},{r.cond_max!r}\n"
            )
