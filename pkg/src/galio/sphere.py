"""Gravity manifold: the 2-sphere of radius r with a rotation-based chart.

oplus maps a 2-vector chart increment through the tangent basis B(x) and
rotates x; ominus recovers the increment from the angle-axis between two
sphere points. boxplus is the separate body-rate propagation operator
x <- Exp(omega dt)^T x and takes a 3-vector, so the type distinction between
chart increments and body rates is kept by the signatures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liegroups import ConditioningError, skew, so3_exp

DEFAULT_GRAVITY = 9.81

# below this value of |x cross y| / r^2 the first-order atan2 form is used
FIRST_ORDER_CROSS = 1e-7
# x.y / r^2 below -1 + this margin counts as antipodal
ANTIPODAL_MARGIN = 1e-9

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class SpherePoint:
    """Point on the sphere of radius `radius`, stored as an ambient 3-vector."""

    vector: np.ndarray
    radius: float

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        object.__setattr__(self, "vector", v)
        n = float(np.linalg.norm(v))
        if not np.isfinite(n) or abs(n - self.radius) > 1e-9 * max(1.0, self.radius):
            raise ValueError(f"vector norm {n} does not match radius {self.radius}")

    @staticmethod
    def from_direction(direction, radius: float = DEFAULT_GRAVITY) -> "SpherePoint":
        d = np.asarray(direction, dtype=float)
        return SpherePoint(d * (radius / np.linalg.norm(d)), radius)


def s2_basis(x: SpherePoint) -> np.ndarray:
    """3x2 tangent basis B(x) = R(x) [e1 e2], columns orthonormal and
    orthogonal to x. Deterministic; the antipode of e3 uses the fixed
    pi-rotation about e1. Cached on the (immutable) point."""
    cached = getattr(x, "_basis", None)
    if cached is not None:
        return cached
    u = x.vector / x.radius
    c = np.cross(E3, u)
    cn = float(np.linalg.norm(c))
    d = float(E3 @ u)
    if cn < 1e-15:
        if d > 0:
            R = np.eye(3)
        else:
            R = so3_exp(np.pi * E1).matrix
    else:
        R = so3_exp((c / cn) * np.arctan2(cn, d)).matrix
    B = R[:, 0:2].copy()
    object.__setattr__(x, "_basis", B)
    return B


def s2_oplus(x: SpherePoint, tau) -> SpherePoint:
    """x + tau = Exp(B(x) tau) x; the rotation keeps the norm exact."""
    tau = np.asarray(tau, dtype=float)
    R = so3_exp(s2_basis(x) @ tau)
    return SpherePoint(R.matrix @ x.vector, x.radius)


def s2_ominus(y: SpherePoint, x: SpherePoint) -> np.ndarray:
    """Chart difference y - x as a 2-vector; antipodal inputs return (pi, 0)."""
    if abs(y.radius - x.radius) > 1e-9 * max(1.0, x.radius):
        raise ValueError(f"radius mismatch: {y.radius} vs {x.radius}")
    r2 = x.radius * x.radius
    c = np.cross(x.vector, y.vector)
    cn = float(np.linalg.norm(c))
    d = float(x.vector @ y.vector)
    if d / r2 < -1.0 + ANTIPODAL_MARGIN:
        return np.array([np.pi, 0.0])
    B = s2_basis(x)
    if cn / r2 < FIRST_ORDER_CROSS:
        # atan2(y, x) ~ y near (1, 0): theta * axis ~ (x cross y) / r^2
        return B.T @ (c / r2)
    theta = np.arctan2(cn / r2, d / r2)
    return B.T @ (c * (theta / cn))


def s2_boxplus(x: SpherePoint, omega_dt) -> SpherePoint:
    """Body-rate propagation x <- Exp(omega dt)^T x (3-vector increment)."""
    R = so3_exp(np.asarray(omega_dt, dtype=float))
    return SpherePoint(R.matrix.T @ x.vector, x.radius)


def s2_ominus_jacobian_wrt_y(x: SpherePoint, y: SpherePoint) -> np.ndarray:
    """2x3 derivative of (y ominus x) w.r.t. the ambient coordinates of y.

    The exact form differentiates theta * axis; near parallel vectors the
    first-order branch B(x)^T [x]_x / r^2 is returned. Antipodal inputs have
    no defined Jacobian.
    """
    r2 = x.radius * x.radius
    c = np.cross(x.vector, y.vector)
    cn = float(np.linalg.norm(c))
    d = float(x.vector @ y.vector)
    if d / r2 < -1.0 + ANTIPODAL_MARGIN:
        raise ConditioningError("ominus Jacobian undefined at the antipode")
    B = s2_basis(x)
    Kx = skew(x.vector)
    if cn / r2 < FIRST_ORDER_CROSS:
        return (B.T @ Kx) / r2
    n = c / cn
    theta = np.arctan2(cn / r2, d / r2)
    r4 = r2 * r2
    # d(theta)/dy and d(axis)/dy of theta * axis, with s^2 + d^2 = r^4
    dtheta = (d * (n @ Kx) - cn * x.vector) / r4
    dn = (np.eye(3) - np.outer(n, n)) @ Kx * (theta / cn)
    return B.T @ (np.outer(n, dtheta) + dn)


def s2_gravity_tilt(g: SpherePoint) -> np.ndarray:
    """3x2 derivative of (g oplus delta) w.r.t. delta at zero: -[g]_x B(g)."""
    return -skew(g.vector) @ s2_basis(g)
