"""Trajectory metrics: absolute position error at ground-truth timestamps
and end-to-end drift. Odometry convention: only the first pose is aligned;
full SE(3) trajectory alignment is off by default and available as a switch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TrajectorySamples:
    """Timed poses: stamps (N,), positions (N,3), rotations (N,3,3)."""

    stamps: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        self.rotations = np.asarray(self.rotations, dtype=float)
        if len(self.stamps) != len(self.positions):
            raise ValueError("stamps and positions disagree")

    def __len__(self):
        return self.stamps.shape[0]


@dataclass
class EvalReport:
    ape_rmse: float
    end_to_end_drift: float
    ape_rmse_axes: tuple = (np.nan, np.nan, np.nan)
    frame_timings_us: dict = field(default_factory=dict)
    map_memory_bytes: int = 0

    def lines(self):
        out = [
            f"ape_rmse={self.ape_rmse!r}",
            f"end_to_end_drift={self.end_to_end_drift!r}",
            f"ape_rmse_x={self.ape_rmse_axes[0]!r}",
            f"ape_rmse_y={self.ape_rmse_axes[1]!r}",
            f"ape_rmse_z={self.ape_rmse_axes[2]!r}",
        ]
        for key, val in sorted(self.frame_timings_us.items()):
            out.append(f"mean_{key}={val!r}")
        out.append(f"map_memory_bytes={self.map_memory_bytes}")
        return out


def _first_pose_alignment(est: TrajectorySamples, truth: TrajectorySamples):
    """Rigid transform mapping the first estimated pose onto the first truth
    pose; applied to the whole estimate."""
    R_a = truth.rotations[0] @ est.rotations[0].T
    t_a = truth.positions[0] - R_a @ est.positions[0]
    return est.positions @ R_a.T + t_a


def ape_errors(est: TrajectorySamples, truth: TrajectorySamples, align_first: bool = True):
    """Per-sample position error vectors at truth timestamps (estimate
    linearly interpolated); raises when the time ranges do not overlap."""
    lo = max(est.stamps[0], truth.stamps[0])
    hi = min(est.stamps[-1], truth.stamps[-1])
    if hi <= lo:
        raise ValueError("trajectories do not overlap in time")
    pos = _first_pose_alignment(est, truth) if align_first else est.positions
    mask = (truth.stamps >= lo - 1e-12) & (truth.stamps <= hi + 1e-12)
    ts = truth.stamps[mask]
    interp = np.stack([np.interp(ts, est.stamps, pos[:, c]) for c in range(3)], axis=1)
    return interp - truth.positions[mask]


def ape_rmse(est: TrajectorySamples, truth: TrajectorySamples, align_first: bool = True) -> float:
    err = ape_errors(est, truth, align_first)
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def ape_rmse_axes(est: TrajectorySamples, truth: TrajectorySamples, align_first: bool = True):
    err = ape_errors(est, truth, align_first)
    return tuple(float(v) for v in np.sqrt(np.mean(err**2, axis=0)))


def end_to_end_drift(est: TrajectorySamples, truth: TrajectorySamples) -> float:
    """|| (p_est_end - p_est_start) - (p_gt_end - p_gt_start) ||."""
    if len(est) == 0 or len(truth) == 0:
        raise ValueError("empty trajectory")
    de = est.positions[-1] - est.positions[0]
    dg = truth.positions[-1] - truth.positions[0]
    return float(np.linalg.norm(de - dg))


def write_eval_report(report: EvalReport, path) -> None:
    with open(path, "w") as f:
        for line in report.lines():
            f.write(line + "\n")
