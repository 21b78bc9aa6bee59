"""Matrix Lie groups SO(3), SE(3) and the Galilean group with exp/log maps,
composition, adjoints and right Jacobians.

Conventions used throughout:
  * rotations are 3x3 matrices acting on column vectors,
  * tangent increments compose on the right: y = x * Exp(tau),
  * Galilean tangents are ordered (rho, nu, theta, iota) as a 10-vector,
    with rho/nu/theta 3-vectors and iota a scalar time shift.

All closed forms fall back to 2nd-order Taylor series below SMALL_ANGLE
so coefficients stay accurate to ~1e-12 near zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

SMALL_ANGLE = 1e-6
PRINCIPAL_MARGIN = 1e-6


class ConditioningError(RuntimeError):
    """A matrix needed by the caller is singular or near-singular."""


class PrincipalDomainError(ValueError):
    """A logarithm was requested outside the principal domain."""


def skew(v) -> np.ndarray:
    """3x3 skew-symmetric matrix [v]x with [v]x w = v x w."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(m) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


# ---------------------------------------------------------------------------
# group element types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Rot3:
    """Rotation matrix wrapper. The matrix is treated as immutable."""

    matrix: np.ndarray

    @staticmethod
    def identity() -> "Rot3":
        return Rot3(np.eye(3))

    @staticmethod
    def from_matrix(m, check: bool = True) -> "Rot3":
        m = np.asarray(m, dtype=float)
        if check:
            _check_rotation(m)
        return Rot3(m)

    def inverse(self) -> "Rot3":
        return Rot3(self.matrix.T.copy())

    def compose(self, other: "Rot3") -> "Rot3":
        return Rot3(self.matrix @ other.matrix)

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)


@dataclass(frozen=True)
class Pose3:
    """Rigid transform (rotation, translation)."""

    rotation: Rot3
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose3":
        return Pose3(Rot3.identity(), np.zeros(3))

    def inverse(self) -> "Pose3":
        rt = self.rotation.matrix.T
        return Pose3(Rot3(rt.copy()), -(rt @ self.translation))

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(
            self.rotation.compose(other.rotation),
            self.rotation.matrix @ other.translation + self.translation,
        )

    def apply(self, v) -> np.ndarray:
        return self.rotation.matrix @ np.asarray(v, dtype=float) + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class GalileanFrame:
    """Element of the Galilean group: rotation, velocity, position, time.

    Embeds as the 5x5 matrix
        [ R  v  p ]
        [ 0  1  t ]
        [ 0  0  1 ]
    so composition is plain matrix multiplication.
    """

    rotation: Rot3
    velocity: np.ndarray
    position: np.ndarray
    time: float

    @staticmethod
    def identity() -> "GalileanFrame":
        return GalileanFrame(Rot3.identity(), np.zeros(3), np.zeros(3), 0.0)

    def matrix(self) -> np.ndarray:
        m = np.eye(5)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.velocity
        m[:3, 4] = self.position
        m[3, 4] = self.time
        return m

    @staticmethod
    def from_matrix(m) -> "GalileanFrame":
        m = np.asarray(m, dtype=float)
        return GalileanFrame(Rot3(m[:3, :3].copy()), m[:3, 3].copy(), m[:3, 4].copy(), float(m[3, 4]))

    def inverse(self) -> "GalileanFrame":
        rt = self.rotation.matrix.T
        return GalileanFrame(
            Rot3(rt.copy()),
            -(rt @ self.velocity),
            rt @ (self.velocity * self.time - self.position),
            -self.time,
        )


def gal_tangent(rho, nu, theta, iota) -> np.ndarray:
    """Pack (rho, nu, theta, iota) into a 10-vector tangent."""
    out = np.empty(10)
    out[0:3], out[3:6], out[6:9], out[9] = rho, nu, theta, iota
    return out


def gal_wedge(tau) -> np.ndarray:
    """5x5 algebra matrix of a 10-vector tangent (zero diagonal in the
    lower-right block, so exp lands on the unit entries of the group)."""
    tau = np.asarray(tau, dtype=float)
    m = np.zeros((5, 5))
    m[:3, :3] = skew(tau[6:9])
    m[:3, 3] = tau[3:6]
    m[:3, 4] = tau[0:3]
    m[3, 4] = tau[9]
    return m


def gal_vee(m) -> np.ndarray:
    return gal_tangent(m[:3, 4], m[:3, 3], unskew(m[:3, :3]), m[3, 4])


def _check_rotation(m, tol: float = 1e-9) -> None:
    if m.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("rotation contains non-finite entries")
    err = np.abs(m.T @ m - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"matrix is not orthonormal (|R^T R - I| = {err:.3e})")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise ValueError("matrix has determinant != +1")


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------


def _rodrigues_coeffs(a2: np.ndarray):
    """sin(a)/a and (1-cos a)/a^2 with Taylor fallback, from a^2."""
    a = np.sqrt(a2)
    small = a < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 1.0 - a2 / 6.0, np.sin(a) / np.where(small, 1.0, a))
        c2 = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(a)) / np.where(small, 1.0, a2))
    return c1, c2


def _so3_exp_batch(thetas: np.ndarray) -> np.ndarray:
    """Rodrigues formula over a batch: (N,3) -> (N,3,3)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    a2 = np.einsum("ni,ni->n", thetas, thetas)
    c1, c2 = _rodrigues_coeffs(a2)
    K = np.zeros((thetas.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -thetas[:, 2], thetas[:, 1]
    K[:, 1, 0], K[:, 1, 2] = thetas[:, 2], -thetas[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -thetas[:, 1], thetas[:, 0]
    K2 = K @ K
    return np.eye(3) + c1[:, None, None] * K + c2[:, None, None] * K2


@njit(cache=True)
def _nb_so3_exp(theta):
    a2 = theta[0] ** 2 + theta[1] ** 2 + theta[2] ** 2
    a = np.sqrt(a2)
    if a < SMALL_ANGLE:
        c1 = 1.0 - a2 / 6.0
        c2 = 0.5 - a2 / 24.0
    else:
        c1 = np.sin(a) / a
        c2 = (1.0 - np.cos(a)) / a2
    t0, t1, t2 = theta[0], theta[1], theta[2]
    K = np.empty((3, 3))
    K[0, 0], K[0, 1], K[0, 2] = 0.0, -t2, t1
    K[1, 0], K[1, 1], K[1, 2] = t2, 0.0, -t0
    K[2, 0], K[2, 1], K[2, 2] = -t1, t0, 0.0
    K2 = K @ K
    out = c1 * K + c2 * K2
    out[0, 0] += 1.0
    out[1, 1] += 1.0
    out[2, 2] += 1.0
    return out


def so3_exp(theta) -> Rot3:
    """Exponential map of SO(3) (Rodrigues closed form)."""
    return Rot3(_nb_so3_exp(np.ascontiguousarray(theta, dtype=np.float64)))


def _so3_log_batch(rots: np.ndarray) -> np.ndarray:
    """Principal logarithm over a batch: (N,3,3) -> (N,3)."""
    rots = np.asarray(rots, dtype=float)
    tr = np.trace(rots, axis1=1, axis2=2)
    cos_a = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    a = np.arccos(cos_a)
    w = 0.5 * np.stack(
        [
            rots[:, 2, 1] - rots[:, 1, 2],
            rots[:, 0, 2] - rots[:, 2, 0],
            rots[:, 1, 0] - rots[:, 0, 1],
        ],
        axis=1,
    )  # = sin(a) * axis
    out = np.empty_like(w)

    near_pi = a > np.pi - 1e-4
    regular = ~near_pi
    aa = a[regular]
    small = aa < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(small, 1.0 + aa * aa / 6.0, aa / np.where(small, 1.0, np.sin(aa)))
    out[regular] = w[regular] * factor[:, None]

    if np.any(near_pi):
        # axis from the symmetric part: a a^T = I + ((R+R^T)/2 - I)/(1-cos a);
        # the angle from arcsin(|w|), which stays well conditioned at pi
        for i in np.flatnonzero(near_pi):
            R = rots[i]
            sym = (R + R.T) / 2.0
            outer = np.eye(3) + (sym - np.eye(3)) / (1.0 - cos_a[i])
            k = int(np.argmax(np.diag(outer)))
            axis = outer[:, k] / np.sqrt(max(outer[k, k], 1e-300))
            # resolve the sign: for a < pi use sin(a)*axis, else canonical
            if np.dot(axis, w[i]) < 0:
                axis = -axis
            elif abs(np.dot(axis, w[i])) < 1e-12:
                j = int(np.argmax(np.abs(axis)))
                if axis[j] < 0:
                    axis = -axis
            angle = np.pi - np.arcsin(min(float(np.linalg.norm(w[i])), 1.0))
            out[i] = angle * axis
    return out


def so3_log(R: Rot3) -> np.ndarray:
    """Principal logarithm, ||result|| <= pi. Rejects non-orthonormal input."""
    _check_rotation(np.asarray(R.matrix, dtype=float))
    return _so3_log_batch(R.matrix[None])[0]


def _jl_coeffs(a2: np.ndarray):
    """(1-cos a)/a^2 and (a-sin a)/a^3 with Taylor fallback."""
    a = np.sqrt(a2)
    small = a < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 0.5 - a2 / 24.0, (1.0 - np.cos(a)) / np.where(small, 1.0, a2))
        c2 = np.where(small, 1.0 / 6.0 - a2 / 120.0, (a - np.sin(a)) / np.where(small, 1.0, a2 * a))
    return c1, c2


def _so3_left_jacobian_batch(thetas: np.ndarray) -> np.ndarray:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    a2 = np.einsum("ni,ni->n", thetas, thetas)
    c1, c2 = _jl_coeffs(a2)
    K = np.zeros((thetas.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -thetas[:, 2], thetas[:, 1]
    K[:, 1, 0], K[:, 1, 2] = thetas[:, 2], -thetas[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -thetas[:, 1], thetas[:, 0]
    return np.eye(3) + c1[:, None, None] * K + c2[:, None, None] * (K @ K)


def so3_left_jacobian(theta) -> np.ndarray:
    return _so3_left_jacobian_batch(np.asarray(theta, dtype=float)[None])[0]


def so3_right_jacobian(theta) -> np.ndarray:
    """Right Jacobian: Exp(theta + d) ~ Exp(theta) Exp(J_r(theta) d)."""
    return so3_left_jacobian(-np.asarray(theta, dtype=float))


def _jl_inv_coeff(a2: float) -> float:
    a = np.sqrt(a2)
    if a < SMALL_ANGLE:
        return 1.0 / 12.0 + a2 / 720.0
    return 1.0 / a2 - (1.0 + np.cos(a)) / (2.0 * a * np.sin(a))


def so3_left_jacobian_inv(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    K = skew(theta)
    return np.eye(3) - 0.5 * K + _jl_inv_coeff(float(theta @ theta)) * (K @ K)


def so3_right_jacobian_inv(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    K = skew(theta)
    return np.eye(3) + 0.5 * K + _jl_inv_coeff(float(theta @ theta)) * (K @ K)


# ---------------------------------------------------------------------------
# SE(3); tangents ordered (rho, theta)
# ---------------------------------------------------------------------------


def se3_exp(tau) -> Pose3:
    tau = np.asarray(tau, dtype=float)
    rho, theta = tau[0:3], tau[3:6]
    return Pose3(so3_exp(theta), so3_left_jacobian(theta) @ rho)


def se3_log(T: Pose3) -> np.ndarray:
    theta = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(theta) @ T.translation
    return np.concatenate([rho, theta])


# ---------------------------------------------------------------------------
# Galilean group
# ---------------------------------------------------------------------------


def _gal_E_batch(thetas: np.ndarray) -> np.ndarray:
    """E(theta) = int_0^1 (1-s) Exp(s theta) ds, the coupling matrix that
    turns a velocity increment into a position increment."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    a2 = np.einsum("ni,ni->n", thetas, thetas)
    a = np.sqrt(a2)
    small = a < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        c1 = np.where(small, 1.0 / 6.0 - a2 / 120.0, (a - np.sin(a)) / np.where(small, 1.0, a2 * a))
        c2 = np.where(
            small,
            1.0 / 24.0 - a2 / 720.0,
            (np.cos(a) - 1.0 + a2 / 2.0) / np.where(small, 1.0, a2 * a2),
        )
    K = np.zeros((thetas.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -thetas[:, 2], thetas[:, 1]
    K[:, 1, 0], K[:, 1, 2] = thetas[:, 2], -thetas[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -thetas[:, 1], thetas[:, 0]
    return 0.5 * np.eye(3) + c1[:, None, None] * K + c2[:, None, None] * (K @ K)


def _sgal3_exp_batch(taus: np.ndarray):
    """(N,10) -> (R (N,3,3), v (N,3), p (N,3), t (N,))."""
    taus = np.atleast_2d(np.asarray(taus, dtype=float))
    rho, nu, theta, iota = taus[:, 0:3], taus[:, 3:6], taus[:, 6:9], taus[:, 9]
    R = _so3_exp_batch(theta)
    Jl = _so3_left_jacobian_batch(theta)
    E = _gal_E_batch(theta)
    v = np.einsum("nij,nj->ni", Jl, nu)
    p = np.einsum("nij,nj->ni", Jl, rho) + iota[:, None] * np.einsum("nij,nj->ni", E, nu)
    return R, v, p, iota.copy()


def sgal3_exp(tau) -> GalileanFrame:
    """Closed-form exponential: R = Exp(theta), v = Jl nu,
    p = Jl rho + iota E(theta) nu, t = iota."""
    R, v, p, t = _sgal3_exp_batch(np.asarray(tau, dtype=float)[None])
    return GalileanFrame(Rot3(R[0]), v[0], p[0], float(t[0]))


def sgal3_log(g: GalileanFrame) -> np.ndarray:
    """Closed-form logarithm; rejects rotations within PRINCIPAL_MARGIN of pi."""
    theta = so3_log(g.rotation)
    angle = float(np.linalg.norm(theta))
    if angle >= np.pi - PRINCIPAL_MARGIN:
        raise PrincipalDomainError(f"rotation angle {angle:.9f} too close to pi")
    jl_inv = so3_left_jacobian_inv(theta)
    nu = jl_inv @ g.velocity
    E = _gal_E_batch(theta[None])[0]
    rho = jl_inv @ (g.position - g.time * (E @ nu))
    return gal_tangent(rho, nu, theta, g.time)


def sgal3_compose(a: GalileanFrame, b: GalileanFrame) -> GalileanFrame:
    """Group product; equals the 5x5 matrix product of the embeddings."""
    Ra = a.rotation.matrix
    return GalileanFrame(
        Rot3(Ra @ b.rotation.matrix),
        Ra @ b.velocity + a.velocity,
        Ra @ b.position + a.velocity * b.time + a.position,
        a.time + b.time,
    )


def sgal3_project_se3(g: GalileanFrame) -> Pose3:
    """Smooth projection onto the rigid pose, discarding velocity and time."""
    return Pose3(g.rotation, g.position.copy())


def sgal3_adjoint(g: GalileanFrame) -> np.ndarray:
    """10x10 Adjoint in (rho, nu, theta, iota) ordering.

    Derived from vee(g tau^ g^-1); satisfies g Exp(tau) g^-1 = Exp(Adj tau).
    """
    R = g.rotation.matrix
    v, p, t = g.velocity, g.position, g.time
    A = np.zeros((10, 10))
    A[0:3, 0:3] = R
    A[0:3, 3:6] = -t * R
    A[0:3, 6:9] = (skew(p) - t * skew(v)) @ R
    A[0:3, 9] = v
    A[3:6, 3:6] = R
    A[3:6, 6:9] = skew(v) @ R
    A[6:9, 6:9] = R
    A[9, 9] = 1.0
    return A


def _sgal3_log_batch(R: np.ndarray, v: np.ndarray, p: np.ndarray, t: np.ndarray) -> np.ndarray:
    theta = _so3_log_batch(R)
    a2 = np.einsum("ni,ni->n", theta, theta)
    K = np.zeros((theta.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -theta[:, 2], theta[:, 1]
    K[:, 1, 0], K[:, 1, 2] = theta[:, 2], -theta[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -theta[:, 1], theta[:, 0]
    a = np.sqrt(a2)
    small = a < SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(
            small,
            1.0 / 12.0 + a2 / 720.0,
            (1.0 / np.where(small, 1.0, a2))
            - (1.0 + np.cos(a)) / np.where(small, 1.0, 2.0 * a * np.sin(a)),
        )
    jl_inv = np.eye(3) - 0.5 * K + c[:, None, None] * (K @ K)
    E = _gal_E_batch(theta)
    nu = np.einsum("nij,nj->ni", jl_inv, v)
    rho = np.einsum("nij,nj->ni", jl_inv, p - t[:, None] * np.einsum("nij,nj->ni", E, nu))
    out = np.empty((theta.shape[0], 10))
    out[:, 0:3], out[:, 3:6], out[:, 6:9], out[:, 9] = rho, nu, theta, t
    return out


# --- scalar njit kernels for the right-Jacobian hot path -------------------


@njit(cache=True)
def _nb_skew_mul(theta, M, out):
    """out = [theta]x @ M for 3x3 M."""
    for j in range(3):
        a, b, c = M[0, j], M[1, j], M[2, j]
        out[0, j] = -theta[2] * b + theta[1] * c
        out[1, j] = theta[2] * a - theta[0] * c
        out[2, j] = -theta[1] * a + theta[0] * b


@njit(cache=True)
def _nb_rot_coeff_mats(theta, c0, c1, c2, out):
    """out = c0 I + c1 K + c2 K^2 with K = [theta]x."""
    t0, t1, t2 = theta[0], theta[1], theta[2]
    K = np.empty((3, 3))
    K[0, 0], K[0, 1], K[0, 2] = 0.0, -t2, t1
    K[1, 0], K[1, 1], K[1, 2] = t2, 0.0, -t0
    K[2, 0], K[2, 1], K[2, 2] = -t1, t0, 0.0
    K2 = K @ K
    for i in range(3):
        for j in range(3):
            out[i, j] = c1 * K[i, j] + c2 * K2[i, j]
        out[i, i] += c0


@njit(cache=True)
def _nb_sgal3_exp(tau, R, v, p):
    """Closed-form exponential into preallocated R (3,3), v (3,), p (3,);
    returns the time component."""
    theta = tau[6:9]
    a2 = theta[0] ** 2 + theta[1] ** 2 + theta[2] ** 2
    a = np.sqrt(a2)
    if a < SMALL_ANGLE:
        s1 = 1.0 - a2 / 6.0
        s2 = 0.5 - a2 / 24.0
        j1 = 0.5 - a2 / 24.0
        j2 = 1.0 / 6.0 - a2 / 120.0
        e1 = 1.0 / 6.0 - a2 / 120.0
        e2 = 1.0 / 24.0 - a2 / 720.0
    else:
        sa, ca = np.sin(a), np.cos(a)
        s1 = sa / a
        s2 = (1.0 - ca) / a2
        j1 = (1.0 - ca) / a2
        j2 = (a - sa) / (a2 * a)
        e1 = (a - sa) / (a2 * a)
        e2 = (ca - 1.0 + a2 / 2.0) / (a2 * a2)
    _nb_rot_coeff_mats(theta, 1.0, s1, s2, R)
    Jl = np.empty((3, 3))
    _nb_rot_coeff_mats(theta, 1.0, j1, j2, Jl)
    E = np.empty((3, 3))
    _nb_rot_coeff_mats(theta, 0.5, e1, e2, E)
    iota = tau[9]
    for i in range(3):
        v[i] = Jl[i, 0] * tau[3] + Jl[i, 1] * tau[4] + Jl[i, 2] * tau[5]
        p[i] = (
            Jl[i, 0] * tau[0] + Jl[i, 1] * tau[1] + Jl[i, 2] * tau[2]
            + iota * (E[i, 0] * tau[3] + E[i, 1] * tau[4] + E[i, 2] * tau[5])
        )
    return iota


@njit(cache=True)
def _nb_sgal3_log(R, v, p, t, out):
    """Closed-form logarithm into out (10,); assumes angle < pi - margin."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    ca = (tr - 1.0) / 2.0
    if ca > 1.0:
        ca = 1.0
    elif ca < -1.0:
        ca = -1.0
    a = np.arccos(ca)
    w0 = 0.5 * (R[2, 1] - R[1, 2])
    w1 = 0.5 * (R[0, 2] - R[2, 0])
    w2 = 0.5 * (R[1, 0] - R[0, 1])
    if a < SMALL_ANGLE:
        f = 1.0 + a * a / 6.0
    else:
        f = a / np.sin(a)
    theta = np.empty(3)
    theta[0], theta[1], theta[2] = w0 * f, w1 * f, w2 * f
    a2 = theta[0] ** 2 + theta[1] ** 2 + theta[2] ** 2
    a = np.sqrt(a2)
    if a < SMALL_ANGLE:
        c = 1.0 / 12.0 + a2 / 720.0
        e1 = 1.0 / 6.0 - a2 / 120.0
        e2 = 1.0 / 24.0 - a2 / 720.0
    else:
        sa, cb = np.sin(a), np.cos(a)
        c = 1.0 / a2 - (1.0 + cb) / (2.0 * a * sa)
        e1 = (a - sa) / (a2 * a)
        e2 = (cb - 1.0 + a2 / 2.0) / (a2 * a2)
    Jli = np.empty((3, 3))
    _nb_rot_coeff_mats(theta, 1.0, -0.5, c, Jli)
    E = np.empty((3, 3))
    _nb_rot_coeff_mats(theta, 0.5, e1, e2, E)
    nu = Jli @ v
    rho = Jli @ (p - t * (E @ nu))
    out[0:3] = rho
    out[3:6] = nu
    out[6:9] = theta
    out[9] = t


@njit(cache=True)
def _nb_jr_fd(tau, h):
    """10x10 right Jacobian by central differences of
    Log(Exp(tau)^-1 Exp(tau + h e_i))."""
    Rb = np.empty((3, 3))
    vb = np.empty(3)
    pb = np.empty(3)
    tb = _nb_sgal3_exp(tau, Rb, vb, pb)
    # invert the base frame
    Rbi = Rb.T.copy()
    vbi = -(Rbi @ vb)
    pbi = Rbi @ (vb * tb - pb)
    tbi = -tb
    J = np.empty((10, 10))
    tp = np.empty(10)
    Rp = np.empty((3, 3))
    vp = np.empty(3)
    pp = np.empty(3)
    lp = np.empty(10)
    lm = np.empty(10)
    for i in range(10):
        for sgn in range(2):
            for j in range(10):
                tp[j] = tau[j]
            tp[i] = tau[i] + (h if sgn == 0 else -h)
            t_val = _nb_sgal3_exp(tp, Rp, vp, pp)
            Rc = Rbi @ Rp
            vc = Rbi @ vp + vbi
            pc = Rbi @ pp + vbi * t_val + pbi
            tc = tbi + t_val
            if sgn == 0:
                _nb_sgal3_log(Rc, vc, pc, tc, lp)
            else:
                _nb_sgal3_log(Rc, vc, pc, tc, lm)
        for j in range(10):
            J[j, i] = (lp[j] - lm[j]) / (2.0 * h)
    return J


def sgal3_right_jacobian(tau, h: float = 1e-6) -> np.ndarray:
    """Right Jacobian of the Galilean exponential, built column-wise by
    central differences of Log(Exp(tau)^-1 Exp(tau + h e_i)).

    Correctness over speed: the filter needs it once per IMU sample and the
    10x10 scale keeps this cheap.
    """
    return _nb_jr_fd(np.ascontiguousarray(tau, dtype=np.float64), h)


def sgal3_right_jacobian_inv(tau) -> np.ndarray:
    J = sgal3_right_jacobian(tau)
    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("right Jacobian is singular") from exc
    if not np.all(np.isfinite(Jinv)):
        raise ConditioningError("right Jacobian inverse is not finite")
    return Jinv


def se3_right_jacobian(tau, h: float = 1e-6) -> np.ndarray:
    """6x6 right Jacobian of SE(3) by central differences.

    SE(3) embeds in the Galilean group as the nu = 0, iota = 0 subgroup, and
    perturbations along (rho, theta) stay inside it, so the corresponding
    sub-block of the Galilean right Jacobian is exactly the SE(3) one.
    """
    tau = np.asarray(tau, dtype=float)
    tau10 = np.zeros(10)
    tau10[0:3] = tau[0:3]
    tau10[6:9] = tau[3:6]
    J10 = sgal3_right_jacobian(tau10, h)
    idx = np.r_[0:3, 6:9]
    return J10[np.ix_(idx, idx)]


# ---------------------------------------------------------------------------
# generic right oplus / ominus
# ---------------------------------------------------------------------------


def group_oplus(x, tau):
    """y = x * Exp(tau) for any of the three matrix groups."""
    if isinstance(x, Rot3):
        return x.compose(so3_exp(tau))
    if isinstance(x, Pose3):
        return x.compose(se3_exp(tau))
    if isinstance(x, GalileanFrame):
        return sgal3_compose(x, sgal3_exp(tau))
    raise TypeError(f"unsupported group element {type(x).__name__}")


def group_ominus(y, x):
    """tau = Log(x^-1 * y), the inverse of group_oplus."""
    if isinstance(x, Rot3):
        return so3_log(x.inverse().compose(y))
    if isinstance(x, Pose3):
        return se3_log(x.inverse().compose(y))
    if isinstance(x, GalileanFrame):
        return sgal3_log(sgal3_compose(x.inverse(), y))
    raise TypeError(f"unsupported group element {type(x).__name__}")


# ---------------------------------------------------------------------------
# batched pose interpolation (hot path for deskewing and beam simulation)
# ---------------------------------------------------------------------------


def interpolate_frames(ga: GalileanFrame, gb: GalileanFrame, s: np.ndarray):
    """Geodesic interpolation g(s) = ga * Exp(s * Log(ga^-1 gb)).

    Returns (R (N,3,3), p (N,3)) of the interpolated rigid poses; velocity
    and time components are interpolated internally but only the projected
    pose is needed by callers.
    """
    s = np.asarray(s, dtype=float)
    delta = sgal3_log(sgal3_compose(ga.inverse(), gb))
    R, v, p, t = _sgal3_exp_batch(s[:, None] * delta[None, :])
    Ra = ga.rotation.matrix
    Rw = np.einsum("ij,njk->nik", Ra, R)
    pw = np.einsum("ij,nj->ni", Ra, p) + np.outer(t, ga.velocity) + ga.position
    return Rw, pw


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to Hamilton quaternion (x, y, z, w), scalar last."""
    m = np.asarray(R, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Hamilton quaternion (x, y, z, w) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float)
    n = x * x + y * y + z * z + w * w
    s = 2.0 / n
    return np.array(
        [
            [1.0 - s * (y * y + z * z), s * (x * y - w * z), s * (x * z + w * y)],
            [s * (x * y + w * z), 1.0 - s * (x * x + z * z), s * (y * z - w * x)],
            [s * (x * z - w * y), s * (y * z + w * x), 1.0 - s * (x * x + y * y)],
        ]
    )
