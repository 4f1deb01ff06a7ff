"""Voxelized Normal Distributions Transform with single-voxel (DIRECT1) lookup.

The score of a scan at a pose is the sum over points of the Magnusson
likelihood ``d1 * exp(-d2/2 * q)``, with ``q`` the Mahalanobis distance of
the transformed point to the Gaussian of the voxel that contains it.
Derivatives are taken with respect to the decoupled pose perturbation used
by the estimators, ``(t + rho, R Exp(phi))``, ordered (rho, phi).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import pack_keys, voxel_indices
from .geometry import PoseSE3

MIN_POINTS = 6
EIG_FLOOR_RATIO = 0.01
EIG_FLOOR_ABS = 1e-6


def magnusson_constants(voxel_size: float, outlier_ratio: float = 0.55) -> tuple[float, float]:
    """(d1, d2) of the Gaussian-plus-uniform fit; d1 is returned positive."""
    c1 = 10.0 * (1.0 - outlier_ratio)
    c2 = outlier_ratio / voxel_size**3
    d3 = -np.log(c2)
    d1 = -np.log(c1 + c2) - d3
    d2 = -2.0 * np.log((-np.log(c1 * np.exp(-0.5) + c2) - d3) / d1)
    return float(-d1), float(d2)


@dataclass(eq=False)
class NdtGrid:
    voxel_size: float
    keys: np.ndarray  # sorted packed voxel keys
    means: np.ndarray
    covs: np.ndarray
    counts: np.ndarray
    active: np.ndarray
    inv_covs: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Row of the active voxel containing each point, -1 where there is none."""
        if len(self.keys) == 0:
            return np.full(len(points), -1, dtype=np.int64)
        q = pack_keys(voxel_indices(points, self.voxel_size))
        rows = np.searchsorted(self.keys, q)
        rows = np.minimum(rows, len(self.keys) - 1)
        hit = (self.keys[rows] == q) & self.active[rows]
        return np.where(hit, rows, -1)

    def voxel(self, point) -> Optional[int]:
        row = int(self.lookup(np.atleast_2d(point))[0])
        return None if row < 0 else row


def regularize_covariances(covs: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(covs)
    floor = np.maximum(EIG_FLOOR_RATIO * vals[:, -1:], EIG_FLOOR_ABS)
    vals = np.maximum(vals, floor)
    out = np.einsum("nij,nj,nkj->nik", vecs, vals, vecs)
    return 0.5 * (out + out.transpose(0, 2, 1))


def build_ndt_grid(points: np.ndarray, voxel_size: float = 1.0, min_points: int = MIN_POINTS) -> NdtGrid:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        z = np.zeros((0, 3))
        return NdtGrid(voxel_size, np.zeros(0, np.int64), z, np.zeros((0, 3, 3)), np.zeros(0, np.int64),
                       np.zeros(0, bool), np.zeros((0, 3, 3)))
    keys = pack_keys(voxel_indices(points, voxel_size))
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    n = len(uniq)
    means = np.column_stack([np.bincount(inv, weights=points[:, k], minlength=n) for k in range(3)])
    means /= counts[:, None]
    centered = points - means[inv]
    covs = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(inv, weights=centered[:, a] * centered[:, b], minlength=n)
            covs[:, a, b] = covs[:, b, a] = s
    covs /= np.maximum(counts - 1, 1)[:, None, None]
    covs = regularize_covariances(covs)
    return NdtGrid(
        voxel_size=voxel_size,
        keys=uniq,
        means=means,
        covs=covs,
        counts=counts,
        active=counts >= min_points,
        inv_covs=np.linalg.inv(covs),
    )


@dataclass
class NdtEval:
    score: float
    gradient: np.ndarray
    hessian: np.ndarray
    n_points: int = 0
    n_matched: int = 0

    @property
    def match_ratio(self) -> float:
        return self.n_matched / self.n_points if self.n_points else 0.0


def ndt_evaluate(
    pose: PoseSE3,
    points: np.ndarray,
    grid: NdtGrid,
    outlier_ratio: float = 0.55,
    gauss_newton: bool = False,
    constants: Optional[tuple[float, float]] = None,
    rows: Optional[np.ndarray] = None,
) -> NdtEval:
    """Score, gradient and Hessian of the scan ``points`` (sensor frame) at ``pose``.

    With ``gauss_newton`` the Hessian drops the curvature of the exponential
    and of the rotation, leaving the negative semi-definite
    ``-d1 d2 sum e J^T C J``.

    ``rows`` pins the voxel association (as returned by ``grid.lookup``)
    instead of recomputing it from the transformed points.
    """
    points = getattr(points, "points", points)
    points = np.asarray(points, dtype=float)
    d1, d2 = constants if constants is not None else magnusson_constants(grid.voxel_size, outlier_ratio)
    R = pose.R
    x = points @ R.T + pose.translation
    if rows is None:
        rows = grid.lookup(x)
    m = rows >= 0
    n_matched = int(m.sum())
    if n_matched == 0:
        return NdtEval(0.0, np.zeros(6), np.zeros((6, 6)), len(points), 0)
    p = points[m]
    d = x[m] - grid.means[rows[m]]
    C = grid.inv_covs[rows[m]]
    Cd = np.matmul(C, d[:, :, None])[:, :, 0]
    q = np.einsum("ni,ni->n", d, Cd)
    e = np.exp(-0.5 * d2 * q)
    score = float(d1 * e.sum())

    # J = [I, -R [p]x];  dT C J = [Cd, p x (R^T Cd)]
    y = Cd @ R
    g = np.concatenate([Cd, np.cross(p, y)], axis=1)
    we = d1 * d2 * e
    gradient = -(we @ g)

    J = np.zeros((len(p), 3, 6))
    J[:, :, :3] = np.eye(3)
    Rp = p @ R.T
    # column k of -R [p]x is R[:, k] x (R p)
    for k in range(3):
        J[:, :, 3 + k] = np.cross(R[:, k], Rp)
    CJ = np.matmul(C, J)
    if gauss_newton:
        H = -(J * we[:, None, None]).reshape(-1, 6).T @ CJ.reshape(-1, 6)
    else:
        JCJ = np.matmul(J.transpose(0, 2, 1), CJ)
        # second derivative of x along (phi_a, phi_b): R (1/2 (e_b p_a + e_a p_b) - delta_ab p)
        yp = np.einsum("ni,ni->n", y, p)
        S = 0.5 * (y[:, :, None] * p[:, None, :] + p[:, :, None] * y[:, None, :])
        S -= yp[:, None, None] * np.eye(3)
        inner = d2 * g[:, :, None] * g[:, None, :] - JCJ
        inner[:, 3:, 3:] -= S
        H = np.tensordot(we, inner, axes=1)
    H = 0.5 * (H + H.T)
    return NdtEval(score, gradient, H, len(points), n_matched)


@dataclass
class MapFactorTerms:
    """Aggregate contribution of one scan-to-map factor to the normal equations."""

    cost: float
    gradient: np.ndarray
    hessian: np.ndarray
    match_ratio: float


def map_factor(
    pose: PoseSE3,
    points: np.ndarray,
    grid: NdtGrid,
    information_scale: float = 100.0,
    outlier_ratio: float = 0.55,
    constants: Optional[tuple[float, float]] = None,
) -> MapFactorTerms:
    """Scan-to-map factor built from the NDT likelihood.

    Per point the residual is the voxel-whitened offset ``C^(1/2) (x - mu)``
    under the NDT exponential kernel; the factor averages over the scan
    points and is weighted by ``information_scale``. Cost, gradient and
    Gauss-Newton Hessian are all linear in ``information_scale``.
    """
    points = np.asarray(getattr(points, "points", points), dtype=float)
    d1, d2 = constants if constants is not None else magnusson_constants(grid.voxel_size, outlier_ratio)
    ev = ndt_evaluate(pose, points, grid, gauss_newton=True, constants=(d1, d2))
    n = max(len(points), 1)
    w = information_scale / n
    cost = w * (d1 * len(points) - ev.score)
    return MapFactorTerms(cost, -w * ev.gradient, -w * ev.hessian, ev.match_ratio)


def map_cost(
    pose: PoseSE3, points: np.ndarray, grid: NdtGrid, information_scale: float = 100.0,
    constants: Optional[tuple[float, float]] = None,
) -> float:
    points = np.asarray(getattr(points, "points", points), dtype=float)
    d1, d2 = constants if constants is not None else magnusson_constants(grid.voxel_size)
    x = points @ pose.R.T + pose.translation
    rows = grid.lookup(x)
    m = rows >= 0
    d = x[m] - grid.means[rows[m]]
    Cd = np.matmul(grid.inv_covs[rows[m]], d[:, :, None])[:, :, 0]
    q = np.einsum("ni,ni->n", d, Cd)
    score = d1 * np.exp(-0.5 * d2 * q).sum()
    return information_scale / max(len(points), 1) * (d1 * len(points) - score)
