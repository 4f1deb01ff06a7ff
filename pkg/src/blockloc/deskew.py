"""Motion compensation of rotating-lidar sweeps.

Every point carries ``t_rel`` in [0, 1], its position inside the sweep. The
relative motion from sweep start to ``t_rel`` takes its translation from a
constant-velocity twist (the previous inter-frame motion) and its rotation
from gyro integration, falling back to the twist's rotation when gyro data
is missing or has gaps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import PoseSE3, TwistLike, TwistSe3, _as_twist, se3_log
from .imu_preint import ImuSample

log = logging.getLogger(__name__)

MAX_GYRO_GAP = 0.02


@dataclass(eq=False)
class RawScan:
    t_start: float
    t_end: float
    points: np.ndarray
    t_rel: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.t_rel = np.asarray(self.t_rel, dtype=float).reshape(-1)
        if len(self.t_rel) != len(self.points):
            raise ValueError("points and t_rel differ in length")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass(eq=False)
class DeskewedScan:
    stamp: float
    points: np.ndarray


@dataclass
class DeskewStats:
    gyro_fallbacks: int = 0


def estimate_twist(pose_km2: PoseSE3, pose_km1: PoseSE3) -> TwistSe3:
    return se3_log(pose_km2.inverse() @ pose_km1)


def _rotvec_to_matrices(rotvecs: np.ndarray) -> np.ndarray:
    """Batched Rodrigues formula, (N, 3) -> (N, 3, 3)."""
    theta = np.linalg.norm(rotvecs, axis=1)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(theta) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(theta)) / safe**2)
    K = np.zeros((len(rotvecs), 3, 3))
    x, y, z = rotvecs[:, 0], rotvecs[:, 1], rotvecs[:, 2]
    K[:, 0, 1], K[:, 0, 2] = -z, y
    K[:, 1, 0], K[:, 1, 2] = z, -x
    K[:, 2, 0], K[:, 2, 1] = -y, x
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def gyro_rotations(
    gyro: Sequence[ImuSample], t_start: float, t_end: float, alphas: np.ndarray, bias: Optional[np.ndarray] = None
) -> Optional[np.ndarray]:
    """Rotation from sweep start to each ``alpha``, or None if the gyro data is unusable."""
    if not gyro:
        return None
    stamps = np.array([s.stamp for s in gyro])
    rates = np.array([s.gyro for s in gyro])
    if bias is not None:
        rates = rates - bias
    if stamps[0] > t_start + 1e-9 or stamps[-1] < t_end - 1e-9:
        return None
    inside = (stamps > t_start) & (stamps < t_end)
    knots = np.concatenate([[t_start], stamps[inside], [t_end]])
    if np.any(np.diff(knots) > MAX_GYRO_GAP + 1e-12):
        return None
    w_knots = np.column_stack([np.interp(knots, stamps, rates[:, k]) for k in range(3)])

    # midpoint integration between knots, accumulated as rotation matrices
    Rk = np.empty((len(knots), 3, 3))
    Rk[0] = np.eye(3)
    steps = 0.5 * (w_knots[:-1] + w_knots[1:]) * np.diff(knots)[:, None]
    dRs = _rotvec_to_matrices(steps)
    for i in range(len(steps)):
        Rk[i + 1] = Rk[i] @ dRs[i]

    t = t_start + alphas * (t_end - t_start)
    seg = np.clip(np.searchsorted(knots, t, side="right") - 1, 0, len(knots) - 2)
    tau = t - knots[seg]
    w_a = w_knots[seg]
    w_t = np.column_stack([np.interp(t, stamps, rates[:, k]) for k in range(3)])
    partial = _rotvec_to_matrices(0.5 * (w_a + w_t) * tau[:, None])
    return Rk[seg] @ partial


def relative_motion(
    twist: TwistLike,
    alphas: np.ndarray,
    gyro: Sequence[ImuSample] = (),
    t_start: float = 0.0,
    t_end: float = 1.0,
    gyro_bias: Optional[np.ndarray] = None,
    stats: Optional[DeskewStats] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(rotations (N,3,3), translations (N,3)) of the sweep-start-to-alpha motion."""
    xi = _as_twist(twist)
    alphas = np.asarray(alphas, dtype=float)
    phi = alphas[:, None] * xi.phi
    rho = alphas[:, None] * xi.rho
    # translation of exp(alpha * xi): V(alpha phi) alpha rho
    theta = np.linalg.norm(phi, axis=1)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    c1 = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(theta)) / safe**2)
    c2 = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (theta - np.sin(theta)) / safe**3)
    pxr = np.cross(phi, rho)
    trans = rho + c1[:, None] * pxr + c2[:, None] * np.cross(phi, pxr)

    rots = None
    if len(gyro):
        rots = gyro_rotations(gyro, t_start, t_end, alphas, gyro_bias)
        if rots is None:
            if stats is not None:
                stats.gyro_fallbacks += 1
            log.warning("gyro data unusable for sweep at %.6f, using twist rotation", t_start)
    if rots is None:
        rots = _rotvec_to_matrices(phi)
    return rots, trans


def deskew_scan(
    scan: RawScan,
    twist: TwistLike,
    gyro: Sequence[ImuSample] = (),
    gyro_bias: Optional[np.ndarray] = None,
    stats: Optional[DeskewStats] = None,
) -> DeskewedScan:
    """Express every point of ``scan`` in the sensor frame at sweep start."""
    xi = _as_twist(twist)
    if not gyro and not np.any(xi.vector):
        return DeskewedScan(scan.t_start, scan.points.copy())
    rots, trans = relative_motion(xi, scan.t_rel, gyro, scan.t_start, scan.t_end, gyro_bias, stats)
    pts = np.einsum("nij,nj->ni", rots, scan.points) + trans
    return DeskewedScan(scan.t_start, pts)


def reskew_points(points: np.ndarray, t_rel: np.ndarray, twist: TwistLike) -> np.ndarray:
    """Inverse of twist-only deskewing: back to the per-point sensor frames."""
    rots, trans = relative_motion(twist, t_rel)
    return np.einsum("nji,nj->ni", rots, np.asarray(points) - trans)

