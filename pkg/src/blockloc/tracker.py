"""Sliding-window lidar-inertial tracking against served block maps.

Every frame is deskewed and matched against the active block's NDT grid
(pose only, from an IMU prediction). Frames that pass the keyframe test join
the window, bringing an IMU factor to the previous keyframe, a scan-to-scan
odometry factor and a scan-to-map factor. The window is optimized jointly;
the oldest keyframe is marginalized once the window is full. Crossing into
another block's territory (nearest centroid changes for a few keyframes in a
row) swaps the grid and marginalizes the window down to its newest states.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cloud import voxel_downsample
from .deskew import DeskewStats, RawScan, deskew_scan, estimate_twist
from .errors import (
    BadImuStream,
    DegenerateMarginalization,
    NearPiRotation,
    ServerError,
    ServerUnavailable,
    TrackingLost,
    Underconstrained,
)
from .geometry import PoseSE3, TwistSe3, hat, right_jacobian_inv, so3_log
from .imu_preint import (
    GRAVITY,
    RBA,
    RBG,
    ImuBias,
    ImuNoise,
    ImuSample,
    PreintDelta,
    estimate_gravity,
    imu_residual,
    imu_segment,
    predict_state,
    preintegrate,
)
from .ndt import NdtGrid, build_ndt_grid, magnusson_constants, map_cost, map_factor
from .solver import Factor, ResidualFactor, SolverOptions, marginalize, optimize

log = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    max_window: int = 20
    reserve_on_switch: int = 5
    hysteresis: int = 3
    prefetch_margin: float = 0.25
    kf_translation: float = 0.5
    kf_rotation_deg: float = 10.0
    kf_interval: float = 1.0
    ndt_voxel: float = 1.0
    ndt_sigma: float = 0.1
    outlier_ratio: float = 0.55
    scan_leaf: float = 0.35
    max_frame_gap: float = 0.5
    min_match_ratio: float = 0.2
    prior_sigma_pos: float = 0.1
    prior_sigma_rot_deg: float = 1.0
    prior_sigma_vel: float = 0.1
    prior_sigma_gyro_bias: float = 1e-3
    prior_sigma_accel_bias: float = 0.05
    frame_sigma_pos: float = 1.0
    frame_sigma_rot_deg: float = 10.0
    odom_info_floor: float = 1.0
    stationary_time: float = 1.0
    frame_iterations: int = 8
    twist_span: int = 5
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    gravity_magnitude: float = 9.81

    @property
    def information_scale(self) -> float:
        return 1.0 / self.ndt_sigma**2


@dataclass(eq=False)
class KeyframeState:
    stamp: float
    pose: PoseSE3
    velocity: np.ndarray
    bias: ImuBias
    bm_id: int = -1

    dim = 15

    def retract(self, delta) -> "KeyframeState":
        delta = np.asarray(delta, dtype=float)
        return KeyframeState(
            self.stamp,
            self.pose.retract(delta[0:6]),
            self.velocity + delta[6:9],
            ImuBias(self.bias.gyro + delta[9:12], self.bias.accel + delta[12:15]),
            self.bm_id,
        )

    def local(self, base: "KeyframeState") -> np.ndarray:
        return np.concatenate(
            [
                self.pose.local(base.pose),
                self.velocity - base.velocity,
                self.bias.gyro - base.bias.gyro,
                self.bias.accel - base.bias.accel,
            ]
        )

    def local_jacobian(self, base: "KeyframeState") -> np.ndarray:
        J = np.eye(15)
        J[3:6, 3:6] = right_jacobian_inv(self.pose.local(base.pose)[3:6])
        return J


class PoseVar:
    """Bare 6-D pose variable for single-scan registration."""

    dim = 6

    def __init__(self, pose: PoseSE3):
        self.pose = pose

    def retract(self, delta) -> "PoseVar":
        return PoseVar(self.pose.retract(delta))

    def local(self, base: "PoseVar") -> np.ndarray:
        return self.pose.local(base.pose)

    def local_jacobian(self, base: "PoseVar") -> np.ndarray:
        J = np.eye(6)
        J[3:6, 3:6] = right_jacobian_inv(self.pose.local(base.pose)[3:6])
        return J


class GridRef:
    """Mutable handle to the active grid, swapped atomically on block switches."""

    def __init__(self, grid: NdtGrid, bm_id: int = -1):
        self.grid = grid
        self.bm_id = bm_id


class MapFactor(Factor):
    """Scan-to-map NDT factor on one state, evaluated against whatever grid is active."""

    kind = "map"

    def __init__(self, key, points: np.ndarray, grid_ref: GridRef, information_scale: float, constants):
        self.keys = (key,)
        self.points = points
        self.grid_ref = grid_ref
        self.scale = information_scale
        self.constants = constants

    def linearize(self, values):
        state = values[self.keys[0]]
        t = map_factor(state.pose, self.points, self.grid_ref.grid, self.scale, constants=self.constants)
        n = state.dim
        g = np.zeros(n)
        H = np.zeros((n, n))
        g[:6] = t.gradient
        H[:6, :6] = t.hessian
        return t.cost, g, H

    def cost(self, values):
        pose = values[self.keys[0]].pose
        return map_cost(pose, self.points, self.grid_ref.grid, self.scale, self.constants)


def relative_pose_residual(state_i, state_j, measured: PoseSE3):
    """Residual of the relative pose ``T_i^-1 T_j`` against ``measured``, ordered (translation, rotation)."""
    Ri, Rj = state_i.pose.R, state_j.pose.R
    dt = state_j.pose.translation - state_i.pose.translation
    r_t = Ri.T @ dt - measured.translation
    r_R = so3_log(measured.R.T @ Ri.T @ Rj)
    Jri = right_jacobian_inv(r_R)
    n_i, n_j = state_i.dim, state_j.dim
    Ji = np.zeros((6, n_i))
    Jj = np.zeros((6, n_j))
    Ji[0:3, 0:3] = -Ri.T
    Ji[0:3, 3:6] = hat(Ri.T @ dt)
    Jj[0:3, 0:3] = Ri.T
    Ji[3:6, 3:6] = -Jri @ Rj.T @ Ri
    Jj[3:6, 3:6] = Jri
    return np.concatenate([r_t, r_R]), Ji, Jj


def odometry_factor(key_i, key_j, measured: PoseSE3, information: np.ndarray) -> ResidualFactor:
    def fn(states):
        r, Ji, Jj = relative_pose_residual(states[0], states[1], measured)
        return r, [Ji, Jj]

    return ResidualFactor((key_i, key_j), fn, information, kind="odom")


def imu_factor(key_i, key_j, delta: PreintDelta, gravity: np.ndarray) -> ResidualFactor:
    def fn(states):
        r, Ji, Jj = imu_residual(states[0], states[1], delta, gravity)
        return r, [Ji, Jj]

    return ResidualFactor((key_i, key_j), fn, delta.information(), kind="imu")


def state_prior(key, mean, sigmas: Sequence[float], kind: str = "prior") -> ResidualFactor:
    info = np.diag(1.0 / np.asarray(sigmas, dtype=float) ** 2)

    def fn(states):
        return states[0].local(mean), [states[0].local_jacobian(mean)]

    return ResidualFactor((key,), fn, info, kind=kind)


def keyframe_policy(pose: PoseSE3, stamp: float, last: KeyframeState, cfg: TrackerConfig) -> bool:
    """Spawn a keyframe on enough motion or time; thresholds are inclusive."""
    d = last.pose.inverse() @ pose
    return (
        float(np.linalg.norm(d.translation)) >= cfg.kf_translation
        or math.degrees(d.angle()) >= cfg.kf_rotation_deg
        or stamp - last.stamp >= cfg.kf_interval
    )


class ImuBuffer:
    def __init__(self, samples: Sequence[ImuSample]):
        self.samples = list(samples)
        self.stamps = np.array([s.stamp for s in self.samples])
        if len(self.stamps) > 1 and np.any(np.diff(self.stamps) <= 0):
            raise BadImuStream("IMU stamps must be strictly increasing")

    def covering(self, t0: float, t1: float) -> list[ImuSample]:
        """Raw samples from the last one at or before t0 to the first one at or after t1."""
        i0 = max(int(np.searchsorted(self.stamps, t0, side="right")) - 1, 0)
        i1 = min(int(np.searchsorted(self.stamps, t1, side="left")) + 1, len(self.samples))
        return self.samples[i0:i1]

    def segment(self, t0: float, t1: float) -> list[ImuSample]:
        return imu_segment(self.covering(t0, t1), t0, t1)


@dataclass
class FrameRecord:
    stamp: float
    pose: PoseSE3
    update_ms: float
    window_size: int
    bm_id: int
    switched: bool
    is_keyframe: bool
    match_ratio: float
    prior_min_eig: Optional[float] = None


def _clamp_information(H: np.ndarray, floor: float) -> np.ndarray:
    H = 0.5 * (H + H.T)
    vals, vecs = np.linalg.eigh(H)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


class Tracker:
    """Owns the sliding window; one instance per tracking thread."""

    def __init__(
        self,
        imu: Sequence[ImuSample],
        grid: NdtGrid,
        bm_id: int = -1,
        library_client=None,
        size_S: float = 30.0,
        config: Optional[TrackerConfig] = None,
        grid_builder=None,
    ):
        self.cfg = config or TrackerConfig()
        self.imu = imu if isinstance(imu, ImuBuffer) else ImuBuffer(imu)
        self.grid_ref = GridRef(grid, bm_id)
        self.client = library_client
        self.size_S = size_S
        self.constants = magnusson_constants(self.cfg.ndt_voxel, self.cfg.outlier_ratio)
        self.grid_builder = grid_builder or (lambda block: build_ndt_grid(block.points, self.cfg.ndt_voxel))
        self.solver_options = SolverOptions()

        self.values: dict[int, KeyframeState] = {}
        self.order: deque[int] = deque()
        self.factors: list[Factor] = []
        self.scans: dict[int, np.ndarray] = {}
        self.odom_grids: dict[int, NdtGrid] = {}
        self._next_key = 0

        self.gravity = GRAVITY.copy()
        self.outputs: list[PoseSE3] = []
        self.history: list[FrameRecord] = []
        self.deskew_stats = DeskewStats()
        self.switches = 0
        self.last_stamp: Optional[float] = None

        self.known_centroids: dict[int, np.ndarray] = {}
        self._foreign_streak = 0
        self._pending: dict[int, NdtGrid] = {}
        self._fetching: set[int] = set()
        self._fetch_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self.server_failures = 0

    # ----- setup

    @property
    def window_size(self) -> int:
        return len(self.order)

    def states(self) -> list[KeyframeState]:
        return [self.values[k] for k in self.order]

    def newest(self) -> KeyframeState:
        return self.values[self.order[-1]]

    def initialize(self, pose: PoseSE3, scan: RawScan, velocity=None) -> PoseSE3:
        """Seed the window from a global-init pose using the first sweep and 1 s of IMU.

        The IMU stretch is assumed stationary unless ``velocity`` is given, in
        which case it only needs to be unaccelerated.
        """
        t0 = scan.t_start
        still = self.imu.covering(t0, t0 + self.cfg.stationary_time)
        bias = ImuBias()
        if len(still) >= 10:
            gyro = np.mean([s.gyro for s in still], axis=0)
            bias = ImuBias(gyro, np.zeros(3))
            self.gravity = estimate_gravity(still, pose, self.cfg.gravity_magnitude)
        pts = self._prepare(scan, TwistSe3.zero(), bias)
        refined, ratio = self.match(pose, pts, pose)
        if ratio < self.cfg.min_match_ratio:
            raise TrackingLost(f"initial scan matches only {ratio:.0%} of points", pose)
        v0 = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=float).reshape(3)
        state = KeyframeState(t0, refined, v0, bias, self.grid_ref.bm_id)
        key = self._add_state(state, pts)
        c = self.cfg
        sig = [c.prior_sigma_pos] * 3 + [math.radians(c.prior_sigma_rot_deg)] * 3
        sig += [c.prior_sigma_vel] * 3 + [c.prior_sigma_gyro_bias] * 3 + [c.prior_sigma_accel_bias] * 3
        self.factors.append(state_prior(key, state, sig))
        self.factors.append(MapFactor(key, pts, self.grid_ref, self.cfg.information_scale, self.constants))
        self._optimize()
        out = self.newest().pose
        self.outputs.append(out)
        self.last_stamp = t0
        self.history.append(FrameRecord(t0, out, 0.0, self.window_size, self.grid_ref.bm_id, False, True, ratio))
        return out

    def _add_state(self, state: KeyframeState, points: np.ndarray) -> int:
        key = self._next_key
        self._next_key += 1
        self.values[key] = state
        self.order.append(key)
        self.scans[key] = points
        return key

    # ----- per-frame pieces

    def _prepare(self, scan: RawScan, twist, bias: ImuBias) -> np.ndarray:
        gyro = self.imu.covering(scan.t_start, scan.t_end)
        desk = deskew_scan(scan, twist, gyro, bias.gyro, self.deskew_stats)
        return voxel_downsample(desk.points, self.cfg.scan_leaf)

    def match(self, guess: PoseSE3, points: np.ndarray, prior_mean: PoseSE3, grid: Optional[NdtGrid] = None):
        """Pose-only registration of ``points`` with a weak prior at ``prior_mean``."""
        grid = grid if grid is not None else self.grid_ref.grid
        c = self.cfg
        ref = GridRef(grid)
        mf = MapFactor(0, points, ref, c.information_scale, self.constants)
        prior = state_prior(0, PoseVar(prior_mean), [c.frame_sigma_pos] * 3 + [math.radians(c.frame_sigma_rot_deg)] * 3)
        opts = SolverOptions(max_iterations=c.frame_iterations)
        try:
            vals, _ = optimize({0: PoseVar(guess)}, [0], [mf, prior], opts)
        except Underconstrained:
            return guess, 0.0
        pose = vals[0].pose
        ratio = map_factor(pose, points, grid, 1.0, constants=self.constants).match_ratio
        return pose, ratio

    def _twist(self, sweep: float) -> TwistSe3:
        """Constant-velocity motion over one sweep, averaged over the last few outputs.

        Differencing only the last two outputs feeds their jitter straight
        back into the deskew and can sustain an oscillation.
        """
        m = min(len(self.history) - 1, self.cfg.twist_span)
        if m < 1:
            return TwistSe3.zero()
        a, b = self.history[-1 - m], self.history[-1]
        try:
            return estimate_twist(a.pose, b.pose).scaled(sweep / (b.stamp - a.stamp))
        except NearPiRotation:
            return TwistSe3.zero()

    def process_frame(self, scan: RawScan) -> PoseSE3:
        start = time.perf_counter()
        stamp = scan.t_start
        if self.last_stamp is None:
            raise RuntimeError("tracker not initialized")
        if stamp - self.last_stamp > self.cfg.max_frame_gap:
            raise TrackingLost(f"{stamp - self.last_stamp:.2f} s gap between sweeps", self.outputs[-1])
        if stamp <= self.last_stamp:
            raise TrackingLost("sweep stamps must increase", self.outputs[-1])
        kf = self.newest()
        try:
            seg = self.imu.segment(kf.stamp, stamp)
            delta = preintegrate(seg, kf.bias, self.gravity, self.cfg.imu_noise)
        except BadImuStream as exc:
            raise TrackingLost(f"IMU unusable: {exc}", self.outputs[-1]) from None
        pred_pose, pred_vel = predict_state(kf, delta)

        pts = self._prepare(scan, self._twist(scan.t_end - scan.t_start), kf.bias)
        pose, ratio = self.match(pred_pose, pts, pred_pose)
        if ratio < self.cfg.min_match_ratio:
            raise TrackingLost(f"only {ratio:.0%} of points matched the map", self.outputs[-1])

        switched = False
        is_kf = keyframe_policy(pose, stamp, kf, self.cfg)
        prior_eig = None
        if is_kf:
            self._add_keyframe(stamp, pose, pred_vel, kf, delta, pts)
            pose = self.newest().pose
            switched = self._switch_policy()
            priors = [f for f in self.factors if f.kind == "margprior"]
            if priors:
                prior_eig = min(f.min_eigenvalue() for f in priors)
        self.outputs.append(pose)
        self.last_stamp = stamp
        ms = 1000.0 * (time.perf_counter() - start)
        self.history.append(
            FrameRecord(stamp, pose, ms, self.window_size, self.grid_ref.bm_id, switched, is_kf, ratio, prior_eig)
        )
        return pose

    def _add_keyframe(self, stamp, pose, velocity, prev: KeyframeState, delta: PreintDelta, pts) -> None:
        prev_key = self.order[-1]
        state = KeyframeState(stamp, pose, velocity, ImuBias(prev.bias.gyro.copy(), prev.bias.accel.copy()), self.grid_ref.bm_id)
        key = self._add_state(state, pts)
        self.factors.append(imu_factor(prev_key, key, delta, self.gravity))
        odom = self._odometry(prev_key, key)
        if odom is not None:
            self.factors.append(odom)
        self.factors.append(MapFactor(key, pts, self.grid_ref, self.cfg.information_scale, self.constants))
        self._optimize()
        if self.window_size > self.cfg.max_window:
            self._marginalize([self.order[0]])

    def _odometry(self, key_i: int, key_j: int) -> Optional[Factor]:
        grid = self.odom_grids.get(key_i)
        if grid is None:
            grid = build_ndt_grid(self.scans[key_i], self.cfg.ndt_voxel)
            self.odom_grids[key_i] = grid
        if grid.n_active == 0:
            return None
        si, sj = self.values[key_i], self.values[key_j]
        guess = si.pose.inverse() @ sj.pose
        rel, ratio = self.match(guess, self.scans[key_j], guess, grid)
        if ratio < self.cfg.min_match_ratio:
            return None
        ev = map_factor(rel, self.scans[key_j], grid, self.cfg.information_scale, constants=self.constants)
        info = _clamp_information(ev.hessian, self.cfg.odom_info_floor)
        # keep only the newest scan-to-scan grid around
        for k in list(self.odom_grids):
            if k != key_j and k != key_i:
                del self.odom_grids[k]
        return odometry_factor(key_i, key_j, rel, info)

    def _optimize(self) -> None:
        try:
            vals, report = optimize(self.values, list(self.order), self.factors, self.solver_options)
        except Underconstrained as exc:
            raise TrackingLost(f"window underconstrained: {exc}", self.outputs[-1] if self.outputs else None) from None
        if report.diverged:
            raise TrackingLost("window optimization diverged", self.outputs[-1] if self.outputs else None)
        for k in self.order:
            vals[k].bm_id = self.values[k].bm_id
        self.values = vals

    def _marginalize(self, drop: Sequence[int]) -> None:
        try:
            self.factors, _ = marginalize(self.values, self.factors, drop)
        except DegenerateMarginalization as exc:
            log.error("marginalization degenerate (%s); dropping factors without a prior", exc)
            self.factors = [f for f in self.factors if not set(drop).intersection(f.keys)]
        for k in drop:
            self.order.remove(k)
            del self.values[k]
            self.scans.pop(k, None)
            self.odom_grids.pop(k, None)

    # ----- block switching

    def _query(self, position) -> Optional[tuple[int, np.ndarray, float]]:
        try:
            bm_id, c, d = self.client.query(position)
        except (ServerUnavailable, ServerError) as exc:
            self.server_failures += 1
            log.warning("map server query failed: %s", exc)
            return None
        self.known_centroids[bm_id] = np.asarray(c, dtype=float)
        return bm_id, c, d

    def _fetch_grid(self, bm_id: int) -> NdtGrid:
        block = self.client.fetch(bm_id)
        return self.grid_builder(block)

    def _prefetch_worker(self, bm_id: int) -> None:
        try:
            grid = self._fetch_grid(bm_id)
        except (ServerUnavailable, ServerError) as exc:
            log.warning("prefetch of block %d failed: %s", bm_id, exc)
            grid = None
        with self._fetch_lock:
            self._fetching.discard(bm_id)
            if grid is not None:
                self._pending[bm_id] = grid

    def _maybe_prefetch(self, position: np.ndarray) -> None:
        own = self.known_centroids.get(self.grid_ref.bm_id)
        if own is None:
            return
        d_own = float(np.linalg.norm(position - own))
        for bm_id, c in self.known_centroids.items():
            if bm_id == self.grid_ref.bm_id:
                continue
            if float(np.linalg.norm(position - c)) < d_own + self.cfg.prefetch_margin * self.size_S:
                with self._fetch_lock:
                    if bm_id in self._pending or bm_id in self._fetching:
                        continue
                    self._fetching.add(bm_id)
                th = threading.Thread(target=self._prefetch_worker, args=(bm_id,), daemon=True)
                th.start()
                self._threads.append(th)

    def _switch_policy(self) -> bool:
        if self.client is None:
            return False
        state = self.newest()
        pos = state.pose.translation
        hit = self._query(pos)
        if hit is None:
            return False
        # look ahead along the direction of travel to discover the next block early
        speed = float(np.linalg.norm(state.velocity))
        if speed > 0.05:
            self._query(pos + state.velocity / speed * self.cfg.prefetch_margin * self.size_S)
        self._maybe_prefetch(pos)
        nearest = hit[0]
        if nearest == self.grid_ref.bm_id:
            self._foreign_streak = 0
            return False
        self._foreign_streak += 1
        if self._foreign_streak < self.cfg.hysteresis:
            return False
        with self._fetch_lock:
            grid = self._pending.pop(nearest, None)
        if grid is None:
            try:
                grid = self._fetch_grid(nearest)
            except (ServerUnavailable, ServerError) as exc:
                self.server_failures += 1
                log.warning("block %d unavailable, staying on block %d: %s", nearest, self.grid_ref.bm_id, exc)
                return False
        keep = self.cfg.reserve_on_switch
        if self.window_size > keep:
            self._marginalize(list(self.order)[: self.window_size - keep])
        for k in self.order:
            self.values[k].bm_id = nearest
        self.grid_ref.grid = grid
        self.grid_ref.bm_id = nearest
        self._foreign_streak = 0
        self.switches += 1
        with self._fetch_lock:
            self._pending.clear()
        log.info("switched to block %d at t=%.3f", nearest, state.stamp)
        return True

    def join(self, timeout: float = 5.0) -> None:
        for th in self._threads:
            th.join(timeout)
