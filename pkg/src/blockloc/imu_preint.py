"""IMU preintegration between keyframes and the matching 15-D residual.

Integration uses the midpoint rule at the IMU rate. Deltas are expressed in
the body frame of the first sample; gravity is left out of the deltas and
enters only through the residual and the propagation step.

Error-state ordering inside a delta (covariance, bias Jacobian rows) is
(rotation, velocity, position); bias Jacobian columns are (gyro, accel).
Keyframe-state tangents are ordered (position, rotation, velocity, gyro bias,
accel bias), i.e. the pose part follows the project-wide (rho, phi) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BadImuStream
from .geometry import PoseSE3, hat, quat_from_matrix, right_jacobian, right_jacobian_inv, so3_exp, so3_log

GRAVITY = np.array([0.0, 0.0, -9.81])

# tangent slices of a 15-D keyframe state
SP, SR, SV, SBG, SBA = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
# residual slices
RR, RV, RP, RBG, RBA = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)


@dataclass(frozen=True, eq=False)
class ImuSample:
    stamp: float
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))


@dataclass
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "ImuBias":
        v = np.asarray(v, dtype=float)
        return cls(v[:3].copy(), v[3:6].copy())


@dataclass
class ImuNoise:
    """Continuous-time noise densities."""

    gyro_noise: float = 1.7e-4  # rad/s/sqrt(Hz)
    accel_noise: float = 2.0e-3  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.0e-5
    accel_walk: float = 1.0e-4


@dataclass
class NavState:
    pose: PoseSE3
    velocity: np.ndarray
    bias: ImuBias = field(default_factory=ImuBias)
    stamp: float = 0.0


@dataclass
class PreintDelta:
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    dt: float
    cov: np.ndarray
    jac: np.ndarray  # 9x6, rows (rot, vel, pos), cols (gyro, accel)
    bias_lin: ImuBias
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    noise: ImuNoise = field(default_factory=ImuNoise)

    def corrected(self, bias: ImuBias) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """First-order re-prediction of (dR, dv, dp) for a different bias."""
        db = bias.vector() - self.bias_lin.vector()
        bg, ba = db[:3], db[3:]
        J = self.jac
        dR = self.dR @ so3_exp(J[0:3, 0:3] @ bg)
        dv = self.dv + J[3:6, 0:3] @ bg + J[3:6, 3:6] @ ba
        dp = self.dp + J[6:9, 0:3] @ bg + J[6:9, 3:6] @ ba
        return dR, dv, dp

    def compose(self, other: "PreintDelta") -> "PreintDelta":
        """Delta over [t0, t2] from deltas over [t0, t1] and [t1, t2] (same bias)."""
        R1, v1, p1, dt2 = self.dR, self.dv, self.dp, other.dt
        dR = R1 @ other.dR
        dv = v1 + R1 @ other.dv
        dp = p1 + v1 * dt2 + R1 @ other.dp
        A = np.eye(9)
        A[0:3, 0:3] = other.dR.T
        A[3:6, 0:3] = -R1 @ hat(other.dv)
        A[6:9, 0:3] = -R1 @ hat(other.dp)
        A[6:9, 3:6] = np.eye(3) * dt2
        B = np.zeros((9, 9))
        B[0:3, 0:3] = np.eye(3)
        B[3:6, 3:6] = R1
        B[6:9, 6:9] = R1
        cov = A @ self.cov @ A.T + B @ other.cov @ B.T
        J1, J2 = self.jac, other.jac
        jac = np.zeros((9, 6))
        jac[0:3, 0:3] = other.dR.T @ J1[0:3, 0:3] + J2[0:3, 0:3]
        jac[3:6] = J1[3:6] + R1 @ J2[3:6]
        jac[3:6, 0:3] -= R1 @ hat(other.dv) @ J1[0:3, 0:3]
        jac[6:9] = J1[6:9] + J1[3:6] * dt2 + R1 @ J2[6:9]
        jac[6:9, 0:3] -= R1 @ hat(other.dp) @ J1[0:3, 0:3]
        return PreintDelta(dR, dv, dp, self.dt + other.dt, cov, jac, self.bias_lin, self.gravity, self.noise)

    def information(self) -> np.ndarray:
        """15x15 information of the residual: preintegration block + bias walks."""
        info = np.zeros((15, 15))
        cov = 0.5 * (self.cov + self.cov.T)
        info[0:9, 0:9] = np.linalg.inv(cov + 1e-18 * np.eye(9))
        dt = max(self.dt, 1e-6)
        info[9:12, 9:12] = np.eye(3) / (self.noise.gyro_walk**2 * dt)
        info[12:15, 12:15] = np.eye(3) / (self.noise.accel_walk**2 * dt)
        return info


def imu_segment(samples: Sequence[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    """Samples covering [t0, t1], with linearly interpolated end samples."""
    if t1 < t0:
        raise BadImuStream(f"segment end {t1} before start {t0}")
    stamps = np.array([s.stamp for s in samples])
    if len(stamps) == 0 or stamps[0] > t0 + 1e-9 or stamps[-1] < t1 - 1e-9:
        raise BadImuStream(f"IMU stream does not cover [{t0}, {t1}]")

    def at(t: float) -> ImuSample:
        i = int(np.searchsorted(stamps, t))
        if i < len(stamps) and abs(stamps[i] - t) < 1e-12:
            return samples[i]
        a, b = samples[i - 1], samples[i]
        w = (t - a.stamp) / (b.stamp - a.stamp)
        return ImuSample(t, (1 - w) * a.accel + w * b.accel, (1 - w) * a.gyro + w * b.gyro)

    lo = int(np.searchsorted(stamps, t0, side="right"))
    hi = int(np.searchsorted(stamps, t1, side="left"))
    inner = [s for s in samples[lo:hi] if t0 < s.stamp < t1]
    out = [at(t0)] + inner
    if t1 > t0:
        out.append(at(t1))
    return out


def preintegrate(
    samples: Sequence[ImuSample],
    bias: Optional[ImuBias] = None,
    gravity: Optional[np.ndarray] = None,
    noise: Optional[ImuNoise] = None,
) -> PreintDelta:
    if len(samples) == 0:
        raise BadImuStream("preintegration needs at least one sample")
    bias = bias if bias is not None else ImuBias()
    gravity = np.asarray(gravity if gravity is not None else GRAVITY, dtype=float)
    noise = noise if noise is not None else ImuNoise()
    R = np.eye(3)
    v = np.zeros(3)
    p = np.zeros(3)
    cov = np.zeros((9, 9))
    JR = np.zeros((3, 3))
    Jvg = np.zeros((3, 3))
    Jva = np.zeros((3, 3))
    Jpg = np.zeros((3, 3))
    Jpa = np.zeros((3, 3))
    total = 0.0
    I3 = np.eye(3)
    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.stamp - s0.stamp
        if not dt > 0.0:
            raise BadImuStream(f"non-increasing IMU stamps at {s1.stamp}")
        w = 0.5 * (s0.gyro + s1.gyro) - bias.gyro
        dRk = so3_exp(w * dt)
        Jr = right_jacobian(w * dt)
        R1 = R @ dRk
        ah0 = s0.accel - bias.accel
        ah1 = s1.accel - bias.accel
        a = 0.5 * (R @ ah0 + R1 @ ah1)

        JR1 = dRk.T @ JR - Jr * dt
        da_dbg = -0.5 * (R @ hat(ah0) @ JR + R1 @ hat(ah1) @ JR1)
        da_dba = -0.5 * (R + R1)

        S = R @ hat(ah0) + R1 @ hat(ah1) @ dRk.T
        A = np.eye(9)
        A[0:3, 0:3] = dRk.T
        A[3:6, 0:3] = -0.5 * S * dt
        A[6:9, 0:3] = -0.25 * S * dt * dt
        A[6:9, 3:6] = I3 * dt
        B = np.zeros((9, 6))
        B[0:3, 0:3] = Jr * dt
        B[3:6, 0:3] = -0.5 * R1 @ hat(ah1) @ Jr * dt * dt
        B[6:9, 0:3] = -0.25 * R1 @ hat(ah1) @ Jr * dt**3
        B[3:6, 3:6] = 0.5 * (R + R1) * dt
        B[6:9, 3:6] = 0.25 * (R + R1) * dt * dt
        Q = np.diag([noise.gyro_noise**2 / dt] * 3 + [noise.accel_noise**2 / dt] * 3)
        cov = A @ cov @ A.T + B @ Q @ B.T

        Jpg = Jpg + Jvg * dt + 0.5 * da_dbg * dt * dt
        Jpa = Jpa + Jva * dt + 0.5 * da_dba * dt * dt
        Jvg = Jvg + da_dbg * dt
        Jva = Jva + da_dba * dt
        JR = JR1

        p = p + v * dt + 0.5 * a * dt * dt
        v = v + a * dt
        R = R1
        total += dt
    jac = np.zeros((9, 6))
    jac[0:3, 0:3] = JR
    jac[3:6, 0:3], jac[3:6, 3:6] = Jvg, Jva
    jac[6:9, 0:3], jac[6:9, 3:6] = Jpg, Jpa
    return PreintDelta(R, v, p, total, 0.5 * (cov + cov.T), jac, bias, gravity, noise)


def predict_state(state, delta: PreintDelta) -> tuple[PoseSE3, np.ndarray]:
    """Pose and velocity at the end of ``delta`` starting from ``state``."""
    Ri = state.pose.R
    dR, dv, dp = delta.corrected(state.bias)
    g, dt = delta.gravity, delta.dt
    Rj = Ri @ dR
    vj = state.velocity + g * dt + Ri @ dv
    pj = state.pose.translation + state.velocity * dt + 0.5 * g * dt * dt + Ri @ dp
    return PoseSE3(quat_from_matrix(Rj), pj), vj


def forward_propagate(
    state,
    samples: Sequence[ImuSample],
    gravity: Optional[np.ndarray] = None,
    noise: Optional[ImuNoise] = None,
) -> tuple[PoseSE3, np.ndarray]:
    """Dead-reckon ``state`` through ``samples`` (which start at the state's time)."""
    delta = preintegrate(samples, state.bias, gravity, noise)
    return predict_state(state, delta)


def imu_residual(state_i, state_j, delta: PreintDelta, gravity: Optional[np.ndarray] = None):
    """Residual (rot, vel, pos, gyro-bias walk, accel-bias walk) and its Jacobians.

    Returns ``(r, J_i, J_j)`` with 15x15 Jacobians with respect to the
    keyframe-state tangents of ``state_i`` and ``state_j``.
    """
    g = np.asarray(gravity if gravity is not None else delta.gravity, dtype=float)
    dt = delta.dt
    Ri, Rj = state_i.pose.R, state_j.pose.R
    pi, pj = state_i.pose.translation, state_j.pose.translation
    vi, vj = np.asarray(state_i.velocity, float), np.asarray(state_j.velocity, float)
    dbg = state_i.bias.gyro - delta.bias_lin.gyro
    dR, dv, dp = delta.corrected(state_i.bias)
    J = delta.jac

    r_R = so3_log(dR.T @ Ri.T @ Rj)
    dvw = vj - vi - g * dt
    dpw = pj - pi - vi * dt - 0.5 * g * dt * dt
    r_v = Ri.T @ dvw - dv
    r_p = Ri.T @ dpw - dp
    r_bg = state_j.bias.gyro - state_i.bias.gyro
    r_ba = state_j.bias.accel - state_i.bias.accel
    r = np.concatenate([r_R, r_v, r_p, r_bg, r_ba])

    Jri = right_jacobian_inv(r_R)
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Ji[RR, SR] = -Jri @ Rj.T @ Ri
    Jj[RR, SR] = Jri
    Ji[RR, SBG] = -Jri @ so3_exp(r_R).T @ right_jacobian(J[0:3, 0:3] @ dbg) @ J[0:3, 0:3]

    Ji[RV, SR] = hat(Ri.T @ dvw)
    Ji[RV, SV] = -Ri.T
    Jj[RV, SV] = Ri.T
    Ji[RV, SBG] = -J[3:6, 0:3]
    Ji[RV, SBA] = -J[3:6, 3:6]

    Ji[RP, SP] = -Ri.T
    Jj[RP, SP] = Ri.T
    Ji[RP, SR] = hat(Ri.T @ dpw)
    Ji[RP, SV] = -Ri.T * dt
    Ji[RP, SBG] = -J[6:9, 0:3]
    Ji[RP, SBA] = -J[6:9, 3:6]

    Ji[RBG, SBG] = -np.eye(3)
    Jj[RBG, SBG] = np.eye(3)
    Ji[RBA, SBA] = -np.eye(3)
    Jj[RBA, SBA] = np.eye(3)
    return r, Ji, Jj


def estimate_gravity(samples: Sequence[ImuSample], orientation: PoseSE3, magnitude: float = 9.81) -> np.ndarray:
    """World gravity from a stationary stretch of accelerometer readings."""
    f = np.mean([s.accel for s in samples], axis=0)
    g_world = -(orientation.R @ f)
    return magnitude * g_world / np.linalg.norm(g_world)
