"""Rigid-body math: SE(3) poses, se(3) twists, exp/log maps and interpolation.

Conventions used everywhere in the package:

* quaternions are stored scalar-last ``(qx, qy, qz, qw)`` with ``qw >= 0``;
* a twist is ordered ``(rho, phi)``: translational part first, rotation second;
* ``PoseSE3`` maps points from its child frame into its parent frame,
  ``p_parent = R @ p_child + t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import InvalidAlpha, NearPiRotation

SMALL_ANGLE = 1e-6
PI_MARGIN = 1e-6


def hat(v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(phi: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.sqrt(phi @ phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix, via its quaternion."""
    return quat_to_rotvec(quat_from_matrix(R))


def right_jacobian(phi: Sequence[float]) -> np.ndarray:
    """SO(3) right Jacobian: Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.sqrt(phi @ phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / t2 * K
        + (theta - np.sin(theta)) / (t2 * theta) * (K @ K)
    )


def right_jacobian_inv(phi: Sequence[float]) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.sqrt(phi @ phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    t2 = theta * theta
    c = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + c * (K @ K)


# ---------------------------------------------------------------------------
# quaternions (x, y, z, w)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.sqrt(q @ q)
    if q[3] < 0.0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    # Shepperd's method: branch on the largest diagonal term
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(np.array(q))


def quat_from_rotvec(phi: Sequence[float]) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.sqrt(phi @ phi))
    if theta < SMALL_ANGLE:
        v = 0.5 * phi * (1.0 - theta * theta / 24.0)
        w = 1.0 - theta * theta / 8.0
    else:
        v = np.sin(0.5 * theta) / theta * phi
        w = np.cos(0.5 * theta)
    return quat_normalize(np.array([v[0], v[1], v[2], w]))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    v = q[:3]
    s = float(np.sqrt(v @ v))
    w = q[3]
    theta = 2.0 * np.arctan2(s, w)
    if theta < SMALL_ANGLE:
        # 2 v / w expanded to second order around the identity
        return 2.0 * v / w * (1.0 - s * s / (3.0 * w * w))
    return theta / s * v


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TwistSe3:
    """Tangent vector of SE(3), ordered (rho, phi)."""

    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rho", np.array(self.rho, dtype=float).reshape(3))
        object.__setattr__(self, "phi", np.array(self.phi, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "TwistSe3":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(v[:3], v[3:])

    @classmethod
    def zero(cls) -> "TwistSe3":
        return cls(np.zeros(3), np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def scaled(self, alpha: float) -> "TwistSe3":
        return TwistSe3(alpha * self.rho, alpha * self.phi)

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))

    def __neg__(self) -> "TwistSe3":
        return TwistSe3(-self.rho, -self.phi)

    def __repr__(self) -> str:
        return f"TwistSe3(rho={self.rho.tolist()}, phi={self.phi.tolist()})"


TwistLike = Union[TwistSe3, Sequence[float], np.ndarray]


def _as_twist(xi: TwistLike) -> TwistSe3:
    return xi if isinstance(xi, TwistSe3) else TwistSe3.from_vector(xi)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform stored as a unit quaternion and a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=float).reshape(4)))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: Sequence[float]) -> "PoseSE3":
        return cls(quat_from_matrix(R), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "PoseSE3":
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw: float) -> "PoseSE3":
        return cls(quat_from_rotvec([0.0, 0.0, yaw]), [x, y, z])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        q = quat_mul(self.rotation, other.rotation)
        t = self.translation + self.R @ other.translation
        return PoseSE3(q, t)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return self.compose(other)

    def inverse(self) -> "PoseSE3":
        qi = quat_conj(self.rotation)
        return PoseSE3(qi, -(quat_to_matrix(qi) @ self.translation))

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.R.T + self.translation

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        s = float(np.sqrt(self.rotation[:3] @ self.rotation[:3]))
        return 2.0 * float(np.arctan2(s, self.rotation[3]))

    def yaw(self) -> float:
        R = self.R
        return float(np.arctan2(R[1, 0], R[0, 0]))

    def retract(self, delta: Sequence[float]) -> "PoseSE3":
        """Decoupled update used by the estimators: t + rho, R Exp(phi)."""
        delta = np.asarray(delta, dtype=float)
        return PoseSE3(quat_mul(self.rotation, quat_from_rotvec(delta[3:6])), self.translation + delta[:3])

    def local(self, base: "PoseSE3") -> np.ndarray:
        """Inverse of ``retract``: the delta with ``base.retract(delta) == self``."""
        dq = quat_mul(quat_conj(base.rotation), self.rotation)
        return np.concatenate([self.translation - base.translation, quat_to_rotvec(dq)])

    def __repr__(self) -> str:
        return f"PoseSE3(q={np.round(self.rotation, 9).tolist()}, t={np.round(self.translation, 9).tolist()})"


def pose_distance(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """(translation distance, rotation angle) between two poses."""
    d = a.inverse() @ b
    return float(np.linalg.norm(d.translation)), d.angle()


def _V(phi: np.ndarray, theta: float) -> np.ndarray:
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return np.eye(3) + (1.0 - np.cos(theta)) / t2 * K + (theta - np.sin(theta)) / (t2 * theta) * (K @ K)


def _V_inv(phi: np.ndarray, theta: float) -> np.ndarray:
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    t2 = theta * theta
    c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / t2
    return np.eye(3) - 0.5 * K + c * (K @ K)


def se3_exp(xi: TwistLike) -> PoseSE3:
    xi = _as_twist(xi)
    theta = float(np.linalg.norm(xi.phi))
    return PoseSE3(quat_from_rotvec(xi.phi), _V(xi.phi, theta) @ xi.rho)


def se3_log(pose: PoseSE3) -> TwistSe3:
    theta = pose.angle()
    if theta >= np.pi - PI_MARGIN:
        raise NearPiRotation(f"rotation angle {theta:.9f} rad is too close to pi")
    phi = quat_to_rotvec(pose.rotation)
    return TwistSe3(_V_inv(phi, theta) @ pose.translation, phi)


def pose_interpolate(base: PoseSE3, xi: TwistLike, alpha: float) -> PoseSE3:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidAlpha(f"alpha={alpha} outside [0, 1]")
    return base @ se3_exp(_as_twist(xi).scaled(alpha))


def average_translation(poses: Iterable[PoseSE3]) -> np.ndarray:
    return np.mean([p.translation for p in poses], axis=0)
