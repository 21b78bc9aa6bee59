"""Bundle-manifold navigation state and its blockwise oplus/ominus/boxplus.

The error vector is a flat 24-vector with the fixed layout

    [0:3]   drho      Galilean position tangent
    [3:6]   dnu       Galilean velocity tangent
    [6:9]   dtheta    Galilean rotation tangent
    [9]     diota     Galilean time tangent
    [10:13] drho_L    extrinsic translation tangent
    [13:16] dtheta_L  extrinsic rotation tangent
    [16:19] dbg       gyro bias
    [19:22] dba       accel bias
    [22:24] dg        gravity chart increment

The 12-dim process-noise vector is ordered (n_gyro, n_accel, n_bg, n_ba).

Two parameterizations of the Galilean block are supported: "sgal3" (default,
the coupled group increment) and "decoupled", which treats rotation on SO(3)
and velocity/position as plain world-frame vectors. The decoupled variant
exists for side-by-side comparison runs only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .liegroups import (
    GalileanFrame,
    Pose3,
    Rot3,
    gal_tangent,
    group_ominus,
    group_oplus,
    so3_exp,
    so3_log,
)
from .sphere import SpherePoint, s2_ominus, s2_oplus

DIM_ERROR = 24
DIM_NOISE = 12

RHO = slice(0, 3)
NU = slice(3, 6)
THETA = slice(6, 9)
IOTA = 9
GAMMA = slice(0, 10)
EXTR = slice(10, 16)
EXTR_RHO = slice(10, 13)
EXTR_THETA = slice(13, 16)
BG = slice(16, 19)
BA = slice(19, 22)
GRAV = slice(22, 24)

N_GYRO = slice(0, 3)
N_ACCEL = slice(3, 6)
N_BG = slice(6, 9)
N_BA = slice(9, 12)

SGAL3 = "sgal3"
DECOUPLED = "decoupled"


@dataclass(frozen=True)
class ImuSample:
    """One inertial reading: timestamp (s), gyro (rad/s), accel (m/s^2)."""

    stamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities (per-axis standard deviations)."""

    gyro_noise_density: float = 0.005
    accel_noise_density: float = 0.02
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density", "gyro_bias_walk", "accel_bias_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class NavState:
    """Bundle state: Galilean frame, LiDAR-IMU extrinsic, biases, gravity."""

    gamma: GalileanFrame
    extrinsic: Pose3
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    gravity: SpherePoint

    @staticmethod
    def identity(gravity_radius: float = 9.81) -> "NavState":
        return NavState(
            GalileanFrame.identity(),
            Pose3.identity(),
            np.zeros(3),
            np.zeros(3),
            SpherePoint(np.array([0.0, 0.0, -gravity_radius]), gravity_radius),
        )


def _gamma_oplus(g: GalileanFrame, delta10: np.ndarray, mode: str) -> GalileanFrame:
    if mode == SGAL3:
        from .liegroups import Rot3, _nb_sgal3_exp

        R = np.empty((3, 3))
        v = np.empty(3)
        p = np.empty(3)
        t = _nb_sgal3_exp(np.ascontiguousarray(delta10, dtype=np.float64), R, v, p)
        Ra = g.rotation.matrix
        return GalileanFrame(
            Rot3(Ra @ R),
            Ra @ v + g.velocity,
            Ra @ p + g.velocity * t + g.position,
            g.time + t,
        )
    if mode == DECOUPLED:
        return GalileanFrame(
            g.rotation.compose(so3_exp(delta10[6:9])),
            g.velocity + delta10[3:6],
            g.position + delta10[0:3],
            g.time + float(delta10[9]),
        )
    raise ValueError(f"unknown gamma mode {mode!r}")


def _gamma_ominus(y: GalileanFrame, x: GalileanFrame, mode: str) -> np.ndarray:
    if mode == SGAL3:
        return group_ominus(y, x)
    if mode == DECOUPLED:
        return gal_tangent(
            y.position - x.position,
            y.velocity - x.velocity,
            so3_log(x.rotation.inverse().compose(y.rotation)),
            y.time - x.time,
        )
    raise ValueError(f"unknown gamma mode {mode!r}")


def state_oplus(x: NavState, delta, mode: str = SGAL3) -> NavState:
    """Blockwise right-increment of the bundle state by a 24-vector.
    Blocks with an exactly zero increment are shared, not recomputed."""
    delta = np.asarray(delta, dtype=float)
    gamma = _gamma_oplus(x.gamma, delta[GAMMA], mode) if delta[GAMMA].any() else x.gamma
    extr = group_oplus(x.extrinsic, delta[EXTR]) if delta[EXTR].any() else x.extrinsic
    grav = s2_oplus(x.gravity, delta[GRAV]) if delta[GRAV].any() else x.gravity
    return NavState(gamma, extr, x.gyro_bias + delta[BG], x.accel_bias + delta[BA], grav)


def state_ominus(y: NavState, x: NavState, mode: str = SGAL3) -> np.ndarray:
    """Blockwise difference, the inverse of state_oplus."""
    out = np.empty(DIM_ERROR)
    out[GAMMA] = _gamma_ominus(y.gamma, x.gamma, mode)
    out[EXTR] = group_ominus(y.extrinsic, x.extrinsic)
    out[BG] = y.gyro_bias - x.gyro_bias
    out[BA] = y.accel_bias - x.accel_bias
    out[GRAV] = s2_ominus(y.gravity, x.gravity)
    return out


def state_boxplus(x: NavState, increment, mode: str = SGAL3) -> NavState:
    """State-evolution operator: the Galilean block advances by its group
    increment, biases integrate their rows, extrinsic and gravity follow
    their (identically zero) rows."""
    return state_oplus(x, increment, mode)
