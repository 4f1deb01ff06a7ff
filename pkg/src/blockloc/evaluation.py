"""Absolute trajectory error and update-time statistics."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientOverlap
from .geometry import PoseSE3, quat_from_matrix

MAX_ASSOC_GAP = 0.05
MODES = ("trans", "full")


@dataclass
class TrajPair:
    stamps: np.ndarray
    estimate: list
    reference: list

    def __len__(self) -> int:
        return len(self.stamps)


def associate(
    estimate: Sequence[tuple[float, PoseSE3]],
    reference: Sequence[tuple[float, PoseSE3]],
    max_gap: float = MAX_ASSOC_GAP,
) -> TrajPair:
    """Pair each estimate with the reference pose nearest in time (within ``max_gap``)."""
    if not reference:
        raise InsufficientOverlap("empty reference trajectory")
    ref_t = np.array([t for t, _ in reference])
    order = np.argsort(ref_t)
    ref_t = ref_t[order]
    stamps, est, ref = [], [], []
    for t, pose in estimate:
        i = int(np.searchsorted(ref_t, t))
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(ref_t) and (best is None or abs(ref_t[j] - t) < abs(ref_t[best] - t)):
                best = j
        if best is not None and abs(ref_t[best] - t) <= max_gap:
            stamps.append(t)
            est.append(pose)
            ref.append(reference[order[best]][1])
    if len(stamps) < 2:
        raise InsufficientOverlap(f"only {len(stamps)} poses associate within {max_gap} s")
    return TrajPair(np.array(stamps), est, ref)


def umeyama(src: np.ndarray, dst: np.ndarray) -> PoseSE3:
    """Rigid transform (no scale) minimizing sum |T src_i - dst_i|^2."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return PoseSE3.from_rt(R, mu_d - R @ mu_s)


def rpy_from_matrix(R: np.ndarray) -> np.ndarray:
    """Roll, pitch, yaw with R = Rz(yaw) Ry(pitch) Rx(roll)."""
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return np.array([roll, pitch, yaw])


def pose_errors(pair: TrajPair, align: bool = True) -> np.ndarray:
    """Per-pose rows ``(ex, ey, ez, er, ep, eyaw)`` after optional alignment."""
    est_t = np.array([p.translation for p in pair.estimate])
    ref_t = np.array([p.translation for p in pair.reference])
    T = umeyama(est_t, ref_t) if align else PoseSE3.identity()
    out = np.zeros((len(pair), 6))
    for i, (e, r) in enumerate(zip(pair.estimate, pair.reference)):
        a = T @ e
        out[i, :3] = a.translation - r.translation
        out[i, 3:] = rpy_from_matrix(r.R.T @ a.R)
    return out


def ate_rmse(pair: TrajPair, mode: str = "trans", align: bool = True) -> float:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if len(pair) < 2:
        raise InsufficientOverlap("need at least two associated poses")
    err = pose_errors(pair, align)
    cols = err[:, :3] if mode == "trans" else err
    return float(np.sqrt(np.mean(np.sum(cols * cols, axis=1))))


def write_error_csv(path: os.PathLike, pair: TrajPair, errors: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "ex", "ey", "ez", "er", "ep", "eyaw"])
        for t, row in zip(pair.stamps, errors):
            w.writerow([f"{t:.9f}"] + [repr(float(v)) for v in row])


@dataclass
class TimingStats:
    mean_ms: float
    p95_ms: float
    per_bm: dict
    switches: int
    rows: int


def timing_stats(rows: Sequence[dict]) -> TimingStats:
    """Mean and 95th percentile of ``update_ms`` overall, plus the mean per block id."""
    if not rows:
        raise ValueError("timing table is empty")
    ms = np.array([r["update_ms"] for r in rows], dtype=float)
    per_bm: dict[int, list] = {}
    for r in rows:
        per_bm.setdefault(int(r["bm_id"]), []).append(float(r["update_ms"]))
    return TimingStats(
        float(ms.mean()),
        float(np.percentile(ms, 95)),
        {k: float(np.mean(v)) for k, v in sorted(per_bm.items())},
        int(sum(bool(r["switched"]) for r in rows)),
        len(rows),
    )
