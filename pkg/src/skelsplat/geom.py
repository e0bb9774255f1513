"""Quaternion, rotation and SE(3) Lie-group math shared by all modules.

Conventions: quaternions are stored (w, x, y, z) with canonical sign w >= 0;
rigid transforms are (3x3 rotation, 3-vector translation); twists are
6-vectors [omega, v] with rotation in radians and translation in scene units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Taylor-series branch below this rotation angle (radians).
SMALL_ANGLE = 1e-6

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize_quat(q):
    """Normalize to unit length and canonicalize sign (w >= 0)."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_mul(a, b):
    """Hamilton product a (x) b, renormalized."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    q = np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])
    return normalize_quat(q)


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    """Unit quaternion -> 3x3 rotation matrix."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """3x3 rotation matrix -> unit quaternion (w >= 0).

    Rejects matrices whose orthonormality residual exceeds 1e-6.
    """
    R = np.asarray(R, dtype=float)
    resid = np.abs(R @ R.T - np.eye(3)).max()
    if resid > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
        raise ValueError(f"matrix is not a rotation (residual {resid:.2e})")
    # Shepperd's method: pick the numerically largest component.
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return normalize_quat(q)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return IDENTITY_QUAT.copy()
    half = 0.5 * angle
    return normalize_quat(np.concatenate([[math.cos(half)], math.sin(half) * axis / n]))


def rotate(q, v):
    """Apply unit quaternion rotation to a 3-vector (or Nx3 array)."""
    return np.asarray(v) @ quat_to_matrix(q).T


def slerp(a, b, u):
    """Spherical interpolation between unit quaternions (shortest arc)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = float(np.dot(a, b))
    if dot < 0:
        b = -b
        dot = -dot
    dot = min(dot, 1.0)
    theta = math.acos(dot)
    if theta < SMALL_ANGLE:
        return normalize_quat((1 - u) * a + u * b)
    s = math.sin(theta)
    return normalize_quat(math.sin((1 - u) * theta) / s * a + math.sin(u * theta) / s * b)


@dataclass
class RigidTransform:
    """SE(3) element: x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quat(q, t):
        return RigidTransform(quat_to_matrix(q), np.asarray(t, dtype=float))

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol=1e-8):
        return (np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() < tol
                and abs(np.linalg.det(self.rotation) - 1.0) < tol)


@dataclass
class Twist:
    """se(3) element: rotation omega (radians * axis) and translation v."""

    omega: np.ndarray
    v: np.ndarray
    near_cut_locus: bool = False

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    def norm(self, rotation_weight=1.0):
        # Unweighted by default: radians and scene units share one norm.
        return math.sqrt(rotation_weight * float(self.omega @ self.omega)
                         + float(self.v @ self.v))

    def as_vector(self):
        return np.concatenate([self.omega, self.v])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def _skew(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def so3_log(R):
    """Rotation matrix -> rotation vector. Second return flags angle near pi."""
    tr = float(np.trace(R))
    cos_theta = max(-1.0, min(1.0, 0.5 * (tr - 1.0)))
    theta = math.acos(cos_theta)
    near_pi = theta > math.pi - 1e-6
    if near_pi:
        # R ~= I + 2 [n]^2 near pi: recover the axis from the diagonal.
        A = 0.5 * (R + np.eye(3))
        n = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(n))
        if n[k] > 1e-12:
            n = A[:, k] / n[k]
            n = n / np.linalg.norm(n)
        else:
            n = np.array([1.0, 0.0, 0.0])
        # Fix the sign using the off-diagonal antisymmetric part.
        a = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if float(a @ n) < 0:
            n = -n
        return theta * n, True
    if theta < SMALL_ANGLE:
        factor = 0.5 + theta * theta / 12.0
    else:
        factor = theta / (2.0 * math.sin(theta))
    a = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return factor * a, False


def so3_exp(omega):
    """Rotation vector -> rotation matrix (Rodrigues with small-angle series)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = _skew(omega)
    if theta < SMALL_ANGLE:
        A = 1.0 - theta * theta / 6.0
        B = 0.5 - theta * theta / 24.0
    else:
        A = math.sin(theta) / theta
        B = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + A * W + B * (W @ W)


def se3_log(t: RigidTransform) -> Twist:
    """Rigid transform -> twist. Flags (but still returns) results near angle pi."""
    omega, near_pi = so3_log(t.rotation)
    theta = np.linalg.norm(omega)
    W = _skew(omega)
    if theta < SMALL_ANGLE:
        # V^-1 = I - W/2 + W^2/12 + O(theta^4)
        Vinv = np.eye(3) - 0.5 * W + W @ W / 12.0
    else:
        half = 0.5 * theta
        coef = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
        Vinv = np.eye(3) - 0.5 * W + coef * (W @ W)
    return Twist(omega, Vinv @ t.translation, near_cut_locus=near_pi)


def se3_exp(xi: Twist) -> RigidTransform:
    omega = xi.omega
    theta = np.linalg.norm(omega)
    W = _skew(omega)
    R = so3_exp(omega)
    if theta < SMALL_ANGLE:
        V = np.eye(3) + 0.5 * W + W @ W / 6.0
    else:
        B = (1.0 - math.cos(theta)) / (theta * theta)
        C = (theta - math.sin(theta)) / (theta ** 3)
        V = np.eye(3) + B * W + C * (W @ W)
    return RigidTransform(R, V @ xi.v)
