"""Iterated error-state Kalman filter on the bundle manifold.

Prediction applies the discrete increment f(x, u, 0) through the state
boxplus and propagates the 24x24 covariance with analytically assembled
transition Jacobians. For the Galilean block these follow

    F_gamma = Adj(Exp(f))^-1 + J_r(f) df/d(x oplus dx)

and the noise Jacobian maps gyro/accel noise through J_r(f) dt. The update
iterates the MAP step with the prior covariance re-projected to the tangent
space of the current iterate by the inverse right Jacobian.

Process-noise discretization: NoiseParams hold continuous-time densities,
the noise Jacobian already carries one factor of dt, so the white-noise
covariance entering F_w Q F_w^T is diag(sigma^2) / dt. This makes e.g. the
attitude block grow by sigma_gyro^2 * dt per step, the zero-order-hold rate,
and keeps Monte-Carlo NEES consistent with a simulator that draws per-sample
noise with standard deviation sigma / sqrt(dt).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .liegroups import (
    ConditioningError,
    sgal3_right_jacobian,
    sgal3_right_jacobian_inv,
    se3_right_jacobian,
    skew,
    so3_exp,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)
from .sphere import s2_gravity_tilt, s2_ominus_jacobian_wrt_y
from .state import (
    BA,
    BG,
    DECOUPLED,
    DIM_ERROR,
    DIM_NOISE,
    EXTR,
    GAMMA,
    GRAV,
    IOTA,
    N_ACCEL,
    N_BA,
    N_BG,
    N_GYRO,
    NU,
    RHO,
    SGAL3,
    THETA,
    ImuSample,
    NavState,
    NoiseParams,
    state_boxplus,
    state_ominus,
    state_oplus,
)


class DivergenceError(RuntimeError):
    """The filter produced a non-finite or non-positive-definite quantity."""


@dataclass(frozen=True)
class FilterState:
    nominal: NavState
    covariance: np.ndarray
    stamp: float


@dataclass(frozen=True)
class MeasurementBatch:
    """Stacked residuals z (M,), Jacobian H (M,24) and diagonal noise (M,)."""

    residuals: np.ndarray
    jacobian: np.ndarray
    noise_diag: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.residuals, dtype=float)
        H = np.asarray(self.jacobian, dtype=float)
        v = np.asarray(self.noise_diag, dtype=float)
        if H.shape != (z.shape[0], DIM_ERROR) or v.shape != z.shape:
            raise ValueError(f"inconsistent batch shapes z{z.shape} H{H.shape} v{v.shape}")
        if z.shape[0] and v.min() <= 0:
            raise ValueError("noise variances must be positive")
        object.__setattr__(self, "residuals", z)
        object.__setattr__(self, "jacobian", H)
        object.__setattr__(self, "noise_diag", v)

    def __len__(self):
        return self.residuals.shape[0]


@dataclass(frozen=True)
class UpdateReport:
    iterations: int
    converged: bool
    num_residuals: int
    degenerate: bool


def f_increment(x: NavState, u: ImuSample, dt: float, mode: str = SGAL3) -> np.ndarray:
    """Nominal-path discrete increment (noise rows zero)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = np.zeros(DIM_ERROR)
    R = x.gamma.rotation.matrix
    g = x.gravity.vector
    omega = np.asarray(u.gyro, dtype=float) - x.gyro_bias
    if mode == SGAL3:
        accel = np.asarray(u.accel, dtype=float) - x.accel_bias + R.T @ g
        out[NU] = accel * dt
    elif mode == DECOUPLED:
        w = R @ (np.asarray(u.accel, dtype=float) - x.accel_bias) + g
        out[RHO] = x.gamma.velocity * dt + 0.5 * w * dt * dt
        out[NU] = w * dt
    else:
        raise ValueError(f"unknown gamma mode {mode!r}")
    out[THETA] = omega * dt
    out[IOTA] = dt
    return out


def _adjoint_inv_of_exp(f_gamma: np.ndarray) -> np.ndarray:
    """Adj(Exp(f))^-1 without intermediate frame objects."""
    from .liegroups import _nb_sgal3_exp

    R = np.empty((3, 3))
    v = np.empty(3)
    p = np.empty(3)
    t = _nb_sgal3_exp(np.ascontiguousarray(f_gamma), R, v, p)
    Ri = R.T
    vi = -(Ri @ v)
    pi = Ri @ (v * t - p)
    ti = -t
    A = np.zeros((10, 10))
    A[0:3, 0:3] = Ri
    A[0:3, 3:6] = -ti * Ri
    A[0:3, 6:9] = (skew(pi) - ti * skew(vi)) @ Ri
    A[0:3, 9] = vi
    A[3:6, 3:6] = Ri
    A[3:6, 6:9] = skew(vi) @ Ri
    A[6:9, 6:9] = Ri
    A[9, 9] = 1.0
    return A


def transition_jacobians(x: NavState, u: ImuSample, dt: float, mode: str = SGAL3, _f=None):
    """Error-state transition Jacobians (F_dx 24x24, F_w 24x12)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    R = x.gamma.rotation.matrix
    g = x.gravity.vector
    tilt = s2_gravity_tilt(x.gravity)  # d(gravity)/d(chart increment), 3x2

    F = np.zeros((DIM_ERROR, DIM_ERROR))
    Fw = np.zeros((DIM_ERROR, DIM_NOISE))
    F[EXTR, EXTR] = np.eye(6)
    F[BG, BG] = np.eye(3)
    F[BA, BA] = np.eye(3)
    F[GRAV, GRAV] = np.eye(2)
    Fw[BG, N_BG] = dt * np.eye(3)
    Fw[BA, N_BA] = dt * np.eye(3)

    if mode == SGAL3:
        f_gamma = (_f if _f is not None else f_increment(x, u, dt, mode))[GAMMA]
        adj_inv = _adjoint_inv_of_exp(f_gamma)
        Jr = sgal3_right_jacobian(f_gamma)
        # df_gamma / d(error state), nonzero rows: nu and theta
        Df = np.zeros((10, DIM_ERROR))
        Df[NU, THETA] = skew(R.T @ g) * dt
        Df[NU, BA] = -np.eye(3) * dt
        Df[NU, GRAV] = (R.T @ tilt) * dt
        Df[THETA, BG] = -np.eye(3) * dt
        F[GAMMA, :] = Jr @ Df
        F[GAMMA, GAMMA] += adj_inv
        Dw = np.zeros((10, DIM_NOISE))
        Dw[THETA, N_GYRO] = -np.eye(3) * dt
        Dw[NU, N_ACCEL] = -np.eye(3) * dt
        Fw[GAMMA, :] = Jr @ Dw
    elif mode == DECOUPLED:
        a_c = np.asarray(u.accel, dtype=float) - x.accel_bias
        theta_f = (np.asarray(u.gyro, dtype=float) - x.gyro_bias) * dt
        Jr_so3 = so3_right_jacobian(theta_f)
        half = 0.5 * dt * dt
        F[RHO, RHO] = np.eye(3)
        F[RHO, NU] = np.eye(3) * dt
        F[RHO, THETA] = -R @ skew(a_c) * half
        F[RHO, BA] = -R * half
        F[RHO, GRAV] = tilt * half
        F[NU, NU] = np.eye(3)
        F[NU, THETA] = -R @ skew(a_c) * dt
        F[NU, BA] = -R * dt
        F[NU, GRAV] = tilt * dt
        F[THETA, THETA] = so3_exp(theta_f).matrix.T
        F[THETA, BG] = -Jr_so3 * dt
        F[IOTA, IOTA] = 1.0
        Fw[RHO, N_ACCEL] = -R * half
        Fw[NU, N_ACCEL] = -R * dt
        Fw[THETA, N_GYRO] = -Jr_so3 * dt
    else:
        raise ValueError(f"unknown gamma mode {mode!r}")
    return F, Fw


def process_noise_cov(q: NoiseParams, dt: float) -> np.ndarray:
    """Covariance of the 12-dim white-noise vector for one dt step."""
    d = np.empty(DIM_NOISE)
    d[N_GYRO] = q.gyro_noise_density**2
    d[N_ACCEL] = q.accel_noise_density**2
    d[N_BG] = q.gyro_bias_walk**2
    d[N_BA] = q.accel_bias_walk**2
    return np.diag(d / dt)


def predict(fs: FilterState, u: ImuSample, dt: float, q: NoiseParams, mode: str = SGAL3) -> FilterState:
    """One discrete prediction step (nominal boxplus + covariance propagation)."""
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt out of range: {dt}")
    f = f_increment(fs.nominal, u, dt, mode)
    F, Fw = transition_jacobians(fs.nominal, u, dt, mode, _f=f)
    nominal = state_boxplus(fs.nominal, f, mode)
    Q = process_noise_cov(q, dt)
    P = F @ fs.covariance @ F.T + Fw @ Q @ Fw.T
    P = 0.5 * (P + P.T)
    if not np.all(np.isfinite(P)):
        raise DivergenceError("covariance became non-finite during prediction")
    return FilterState(nominal, P, fs.stamp + dt)


def projection_jacobian(xj: NavState, xprior: NavState, mode: str = SGAL3) -> np.ndarray:
    """Blockwise d((xj oplus d) ominus xprior)/dd at d = 0; identity when
    xj == xprior. Equals the inverse right Jacobian on the group blocks."""
    delta = state_ominus(xj, xprior, mode)
    J = np.eye(DIM_ERROR)
    if not np.any(delta):
        return J
    if mode == SGAL3:
        J[GAMMA, GAMMA] = sgal3_right_jacobian_inv(delta[GAMMA])
    else:
        J[THETA, THETA] = so3_right_jacobian_inv(delta[THETA])
    Jse3 = se3_right_jacobian(delta[EXTR])
    try:
        J[EXTR, EXTR] = np.linalg.inv(Jse3)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("extrinsic right Jacobian is singular") from exc
    J[GRAV, GRAV] = s2_ominus_jacobian_wrt_y(xprior.gravity, xj.gravity) @ s2_gravity_tilt(xj.gravity)
    return J


def _spd_solve(A: np.ndarray, B: np.ndarray, what: str) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(A, check_finite=False)
        return scipy.linalg.cho_solve((c, low), B, check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise DivergenceError(f"{what} is not positive definite") from exc


def iterated_update(
    fs: FilterState,
    provider,
    eps: float = 1e-4,
    max_iters: int = 5,
    mode: str = SGAL3,
):
    """Iterated MAP update.

    `provider` maps a candidate NavState to a MeasurementBatch (or None).
    Error-state directions with exactly zero prior variance are equality
    constraints (e.g. the time tangent at startup): they are excluded from
    the solve and stay untouched rather than being silently regularized.

    Returns (FilterState, UpdateReport).
    """
    if eps <= 0 or max_iters < 1:
        raise ValueError("eps must be positive and max_iters >= 1")
    P_hat = fs.covariance
    active = np.flatnonzero(np.diag(P_hat) > 0.0)
    x_prior = fs.nominal
    x_j = x_prior
    A_chol = None
    iterations = 0
    converged = False
    num_residuals = 0

    for _ in range(max_iters):
        batch = provider(x_j)
        if batch is None or len(batch) == 0:
            if iterations == 0:
                return fs, UpdateReport(0, False, 0, True)
            break
        iterations += 1
        num_residuals = len(batch)

        J = projection_jacobian(x_j, x_prior, mode)[np.ix_(active, active)]
        P_a = P_hat[np.ix_(active, active)]
        # projected prior covariance P_j = J^-1 P J^-T and its inverse
        Y = np.linalg.solve(J, P_a)
        P_j = np.linalg.solve(J, Y.T).T
        P_j = 0.5 * (P_j + P_j.T)
        P_j_inv = _spd_solve(P_j, np.eye(active.size), "projected prior covariance")

        H = batch.jacobian[:, active]
        Ht_Vinv = H.T / batch.noise_diag
        S = Ht_Vinv @ H
        b = Ht_Vinv @ batch.residuals
        A = S + P_j_inv
        try:
            A_chol = scipy.linalg.cho_factor(0.5 * (A + A.T), check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise DivergenceError("information matrix is not positive definite") from exc

        eta = np.linalg.solve(J, state_ominus(x_j, x_prior, mode)[active])
        dx_a = -scipy.linalg.cho_solve(A_chol, b + P_j_inv @ eta, check_finite=False)
        dx = np.zeros(DIM_ERROR)
        dx[active] = dx_a
        x_j = state_oplus(x_j, dx, mode)
        if float(np.linalg.norm(dx)) < eps:
            converged = True
            break

    P_new = np.zeros_like(P_hat)
    P_active = scipy.linalg.cho_solve(A_chol, np.eye(active.size), check_finite=False)
    P_new[np.ix_(active, active)] = 0.5 * (P_active + P_active.T)
    if not np.all(np.isfinite(P_new)):
        raise DivergenceError("covariance became non-finite during update")
    return (
        FilterState(x_j, P_new, fs.stamp),
        UpdateReport(iterations, converged, num_residuals, False),
    )


def map_cost(x: NavState, fs_prior: FilterState, batch: MeasurementBatch, mode: str = SGAL3) -> float:
    """MAP objective 0.5 z^T V^-1 z + 0.5 ||x ominus xhat||^2_{P^-1} (active
    subspace only), used by the descent diagnostics."""
    d = state_ominus(x, fs_prior.nominal, mode)
    active = np.flatnonzero(np.diag(fs_prior.covariance) > 0.0)
    P_a = fs_prior.covariance[np.ix_(active, active)]
    prior_term = float(d[active] @ np.linalg.solve(P_a, d[active]))
    meas_term = float(batch.residuals @ (batch.residuals / batch.noise_diag))
    return 0.5 * (meas_term + prior_term)
