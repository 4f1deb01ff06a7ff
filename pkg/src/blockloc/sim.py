"""Synthetic worlds, trajectories and sensor streams.

The world is a ground plane plus axis-aligned boxes (walls, pillars,
crates). A multi-ring lidar is ray-cast column by column, each column at its
own firing time, so sweeps carry real motion skew. IMU samples come from the
analytic derivatives of the trajectory. Noise is drawn from a counter-based
generator keyed on (seed, stream, index), so any frame can be re-rendered on
its own and runs are bit-reproducible.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .deskew import RawScan
from .errors import OutOfWorld
from .formats import write_imu_csv, write_scan, write_trajectory
from .geometry import PoseSE3
from .imu_preint import GRAVITY, ImuNoise, ImuSample

SENSOR_HEIGHT = 1.0
_STREAM_SCAN = 1
_STREAM_IMU = 2
_STREAM_OFFLINE = 3


def noise_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    key = (int(seed) << 64) | (int(stream) << 40) | int(index)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class WorldModel:
    box_min: np.ndarray  # (n, 3)
    box_max: np.ndarray
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    ground_z: float = 0.0

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.bounds_min) & (p <= self.bounds_max), axis=1)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to the nearest surface (ground or box)."""
        p = np.atleast_2d(points)
        best = np.abs(p[:, 2] - self.ground_z)
        for lo, hi in zip(self.box_min, self.box_max):
            q = np.maximum(lo - p, 0) + np.maximum(p - hi, 0)
            outside = np.linalg.norm(q, axis=1)
            inside = np.min(np.minimum(p - lo, hi - p), axis=1)
            d = np.where(outside > 0, outside, np.abs(inside))
            best = np.minimum(best, d)
        return best


def raycast(world: WorldModel, origins: np.ndarray, dirs: np.ndarray, max_range: float) -> np.ndarray:
    """Range to the first hit along each ray (``inf`` for no return)."""
    origins = np.atleast_2d(origins)
    n = len(dirs)
    t_best = np.full(n, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        dz = dirs[:, 2]
        t_ground = (world.ground_z - origins[:, 2]) / dz
    t_best = np.where((dz < 0) & (t_ground > 0), t_ground, t_best)
    if len(world.box_min):
        reach = np.linalg.norm(origins.mean(axis=0) - 0.5 * (world.box_min + world.box_max), axis=1)
        half = 0.5 * np.linalg.norm(world.box_max - world.box_min, axis=1)
        spread = float(np.max(np.linalg.norm(origins - origins.mean(axis=0), axis=1)))
        near = np.nonzero(reach - half - spread <= max_range)[0]
        with np.errstate(invalid="ignore"):
            for j in near:
                t1 = (world.box_min[j] - origins) * inv
                t2 = (world.box_max[j] - origins) * inv
                t_enter = np.nanmax(np.minimum(t1, t2), axis=1)
                t_exit = np.nanmin(np.maximum(t1, t2), axis=1)
                hit = (t_enter <= t_exit) & (t_enter > 0)
                t_best = np.where(hit & (t_enter < t_best), t_enter, t_best)
    t_best[t_best > max_range] = np.inf
    return t_best


@dataclass
class LidarModel:
    rings: int = 16
    columns: int = 240
    fov_down_deg: float = -15.0
    fov_up_deg: float = 15.0
    max_range: float = 40.0
    period: float = 0.1

    def ring_elevations(self) -> np.ndarray:
        return np.radians(np.linspace(self.fov_down_deg, self.fov_up_deg, self.rings))

    def column_azimuths(self) -> np.ndarray:
        return -math.pi + 2.0 * math.pi * np.arange(self.columns) / self.columns

    def directions(self) -> np.ndarray:
        """(columns, rings, 3) unit vectors in the sensor frame."""
        el = self.ring_elevations()[None, :]
        az = self.column_azimuths()[:, None]
        return np.stack(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)], axis=-1
        )


class PathSpec:
    """Planar path made of straight and circular pieces, parametrized by arc length."""

    def __init__(self, start: Sequence[float], heading: float, pieces: Sequence[tuple[float, float]], z: float):
        # pieces: (length, curvature)
        self.z = z
        self.pieces = []
        p = np.asarray(start, dtype=float)
        h = float(heading)
        s = 0.0
        for length, kappa in pieces:
            self.pieces.append((s, length, kappa, p.copy(), h))
            p, h = self._advance(p, h, length, kappa)
            s += length
        self.length = s

    @staticmethod
    def _advance(p, h, ds, kappa):
        if kappa == 0.0:
            return p + ds * np.array([math.cos(h), math.sin(h)]), h
        h1 = h + kappa * ds
        return p + np.array([math.sin(h1) - math.sin(h), -math.cos(h1) + math.cos(h)]) / kappa, h1

    def evaluate(self, s: float) -> tuple[np.ndarray, float, float]:
        """(xy, heading, curvature) at arc length ``s``."""
        s = min(max(s, 0.0), self.length)
        for s0, length, kappa, p0, h0 in self.pieces:
            if s <= s0 + length or (s0, length) == self.pieces[-1][:2]:
                p, h = self._advance(p0, h0, s - s0, kappa)
                return p, h, kappa
        raise AssertionError("unreachable")


@dataclass
class TrajectorySpec:
    path: PathSpec
    speed: float = 1.0
    hold: float = 1.0
    ramp: float = 2.0
    frame_rate: float = 10.0
    imu_rate: float = 200.0
    range_sigma: float = 0.02
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    gyro_bias: np.ndarray = field(default_factory=lambda: np.array([0.001, -0.0015, 0.002]))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    imu_noise_on: bool = True
    duration: Optional[float] = None

    def __post_init__(self):
        if self.speed < 0 or self.frame_rate <= 0 or self.imu_rate <= 0:
            raise ValueError("speed must be non-negative and rates positive")

    @property
    def end_time(self) -> float:
        if self.duration is not None:
            return self.duration
        if self.speed == 0:
            return self.hold + 4.0
        return self.hold + self.path.length / self.speed + 0.5 * self.ramp

    def arc(self, t: float) -> tuple[float, float, float]:
        """(s, ds/dt, d2s/dt2), cosine speed ramp after a stationary hold."""
        v, T = self.speed, self.ramp
        tau = t - self.hold
        if tau <= 0 or v == 0:
            return 0.0, 0.0, 0.0
        if tau < T:
            w = math.pi / T
            return 0.5 * v * (tau - math.sin(w * tau) / w), 0.5 * v * (1 - math.cos(w * tau)), 0.5 * v * w * math.sin(w * tau)
        return 0.5 * v * T + v * (tau - T), v, 0.0

    def state(self, t: float):
        """Pose, world velocity, world acceleration and body angular rate at time ``t``."""
        s, sd, sdd = self.arc(t)
        if s >= self.path.length:
            s, sd, sdd = self.path.length, 0.0, 0.0
        xy, h, kappa = self.path.evaluate(s)
        tangent = np.array([math.cos(h), math.sin(h), 0.0])
        normal = np.array([-math.sin(h), math.cos(h), 0.0])
        pose = PoseSE3.from_xyz_yaw(xy[0], xy[1], self.path.z, h)
        vel = sd * tangent
        acc = sdd * tangent + sd * sd * kappa * normal
        omega = np.array([0.0, 0.0, kappa * sd])
        return pose, vel, acc, omega

    def pose(self, t: float) -> PoseSE3:
        return self.state(t)[0]


@dataclass
class Scenario:
    name: str
    world: WorldModel
    trajectory: TrajectorySpec
    size_S: float
    lidar: LidarModel = field(default_factory=LidarModel)
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.trajectory.end_time * self.trajectory.frame_rate + 1e-9))

    def frame_start(self, k: int) -> float:
        return k / self.trajectory.frame_rate


def _corridor_world(path: PathSpec, half_width: float, seed: int, closed: bool) -> WorldModel:
    """Walls on both sides of the path plus pillars and crates along them."""
    rng = np.random.default_rng(seed)
    boxes = []
    wall_h = 3.0
    thick = 0.4
    samples = np.arange(0.0, path.length, 0.5)
    xy = np.array([path.evaluate(s)[0] for s in samples])
    lo = xy.min(axis=0) - half_width
    hi = xy.max(axis=0) + half_width
    if closed:
        # outer ring of walls and a solid block inside the loop
        boxes.append(([lo[0] - thick, lo[1] - thick, 0], [hi[0] + thick, lo[1], wall_h]))
        boxes.append(([lo[0] - thick, hi[1], 0], [hi[0] + thick, hi[1] + thick, wall_h]))
        boxes.append(([lo[0] - thick, lo[1], 0], [lo[0], hi[1], wall_h]))
        boxes.append(([hi[0], lo[1], 0], [hi[0] + thick, hi[1], wall_h]))
        ilo = xy.min(axis=0) + half_width
        ihi = xy.max(axis=0) - half_width
        boxes.append(([ilo[0], ilo[1], 0], [ihi[0], ihi[1], wall_h]))
    else:
        boxes.append(([lo[0] - 2, lo[1] - thick, 0], [hi[0] + 2, lo[1], wall_h]))
        boxes.append(([lo[0] - 2, hi[1], 0], [hi[0] + 2, hi[1] + thick, wall_h]))
        boxes.append(([lo[0] - 2 - thick, lo[1], 0], [lo[0] - 2, hi[1], wall_h]))
        boxes.append(([hi[0] + 2, lo[1], 0], [hi[0] + 2 + thick, hi[1], wall_h]))
    # features along the corridor so that every stretch constrains all axes
    s = 1.5
    side = 1.0
    while s < path.length - 1.0:
        p, h, _ = path.evaluate(s)
        n = np.array([-math.sin(h), math.cos(h)])
        off = side * (half_width - rng.uniform(0.8, 1.8))
        c = p + off * n
        if rng.random() < 0.65:
            w = rng.uniform(0.3, 0.7)
            boxes.append(([c[0] - w / 2, c[1] - w / 2, 0], [c[0] + w / 2, c[1] + w / 2, wall_h]))
        else:
            wx, wy = rng.uniform(0.6, 1.6, size=2)
            top = rng.uniform(0.8, 2.2)
            boxes.append(([c[0] - wx / 2, c[1] - wy / 2, 0], [c[0] + wx / 2, c[1] + wy / 2, top]))
        side = -side
        s += rng.uniform(2.0, 3.5)
    bmin = np.array([b[0] for b in boxes], dtype=float)
    bmax = np.array([b[1] for b in boxes], dtype=float)
    return WorldModel(bmin, bmax, np.array([lo[0] - 3, lo[1] - 3, -1.0]), np.array([hi[0] + 3, hi[1] + 3, 10.0]))


def rounded_rectangle(a: float, b: float, rc: float, z: float = SENSOR_HEIGHT) -> PathSpec:
    k = 1.0 / rc
    quarter = 0.5 * math.pi * rc
    pieces = [
        (a / 2 - rc, 0.0), (quarter, k), (b - 2 * rc, 0.0), (quarter, k),
        (a - 2 * rc, 0.0), (quarter, k), (b - 2 * rc, 0.0), (quarter, k), (a / 2 - rc, 0.0),
    ]
    return PathSpec((0.0, -b / 2), 0.0, pieces, z)


SCENARIOS = ("corridor-loop", "corridor-loop-large", "straight", "stationary")


def make_scenario(name: str, seed: int = 7, **overrides) -> Scenario:
    """Named desk-scale scenarios; ``overrides`` patch the trajectory spec."""
    if name == "corridor-loop":
        path = rounded_rectangle(62.0, 42.0, 4.0)
        world = _corridor_world(path, 5.0, seed, closed=True)
        S = 30.0
    elif name == "corridor-loop-large":
        path = rounded_rectangle(150.0, 100.0, 4.0)
        world = _corridor_world(path, 5.0, seed, closed=True)
        S = 30.0
    elif name == "straight":
        path = PathSpec((0.0, 0.0), 0.0, [(50.0, 0.0)], SENSOR_HEIGHT)
        world = _corridor_world(path, 5.0, seed, closed=False)
        S = 100.0
    elif name == "stationary":
        path = PathSpec((0.0, 0.0), 0.0, [(10.0, 0.0)], SENSOR_HEIGHT)
        world = _corridor_world(path, 5.0, seed, closed=False)
        S = 100.0
        overrides.setdefault("speed", 0.0)
    else:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    traj = TrajectorySpec(path=path, **overrides)
    return Scenario(name, world, traj, S, seed=seed)


def render_scan(scenario: Scenario, k: int, noise: bool = True) -> RawScan:
    lidar, traj = scenario.lidar, scenario.trajectory
    t0 = scenario.frame_start(k)
    dirs = lidar.directions()
    cols = lidar.columns
    alphas = np.arange(cols) / cols
    origins = np.empty((cols, 3))
    rots = np.empty((cols, 3, 3))
    for c in range(cols):
        pose = traj.pose(t0 + alphas[c] * lidar.period)
        origins[c] = pose.translation
        rots[c] = pose.R
    world_dirs = np.einsum("cij,crj->cri", rots, dirs)
    o = np.repeat(origins, lidar.rings, axis=0)
    ranges = raycast(scenario.world, o, world_dirs.reshape(-1, 3), lidar.max_range)
    if noise and traj.range_sigma > 0:
        ranges = ranges + traj.range_sigma * noise_rng(scenario.seed, _STREAM_SCAN, k).standard_normal(len(ranges))
    ok = np.isfinite(ranges) & (ranges > 0.1)
    pts = dirs.reshape(-1, 3)[ok] * ranges[ok, None]
    t_rel = np.repeat(alphas, lidar.rings)[ok]
    return RawScan(t0, t0 + lidar.period, pts, t_rel)


def synthesize_imu(scenario: Scenario, noise: bool = True, t_end: Optional[float] = None) -> list[ImuSample]:
    traj = scenario.trajectory
    t_end = traj.end_time + 0.2 if t_end is None else t_end
    n = int(math.floor(t_end * traj.imu_rate)) + 1
    stamps = np.arange(n) / traj.imu_rate
    accel = np.empty((n, 3))
    gyro = np.empty((n, 3))
    for i, t in enumerate(stamps):
        pose, _, acc, omega = traj.state(t)
        accel[i] = pose.R.T @ (acc - GRAVITY)
        gyro[i] = omega
    if noise and traj.imu_noise_on:
        rng = noise_rng(scenario.seed, _STREAM_IMU, 0)
        root = math.sqrt(traj.imu_rate)
        gyro += traj.imu_noise.gyro_noise * root * rng.standard_normal((n, 3)) + traj.gyro_bias
        accel += traj.imu_noise.accel_noise * root * rng.standard_normal((n, 3)) + traj.accel_bias
    return [ImuSample(float(t), a, g) for t, a, g in zip(stamps, accel, gyro)]


@dataclass
class Dataset:
    scenario: Scenario
    scans: list
    imu: list
    ground_truth: list  # (stamp, pose) at each sweep start
    offline: list

    @property
    def start_pose(self) -> PoseSE3:
        return self.ground_truth[0][1]


def check_in_world(scenario: Scenario) -> None:
    traj = scenario.trajectory
    ts = np.linspace(0.0, traj.end_time, max(2, int(traj.end_time * 10)))
    pts = np.array([traj.pose(t).translation for t in ts])
    bad = ~scenario.world.contains(pts)
    if np.any(bad):
        raise OutOfWorld(f"trajectory leaves the world at t = {ts[np.argmax(bad)]:.3f} s")


def render_dataset(
    scenario: Scenario,
    frames: Optional[Sequence[int]] = None,
    noise: bool = True,
    offline_sigma: float = 0.0,
) -> Dataset:
    check_in_world(scenario)
    frames = range(scenario.n_frames) if frames is None else frames
    scans = [render_scan(scenario, k, noise) for k in frames]
    imu = synthesize_imu(scenario, noise)
    traj = scenario.trajectory
    gt = [(s.t_start, traj.pose(s.t_start)) for s in scans]
    offline = []
    for k, (t, pose) in zip(frames, gt):
        if offline_sigma > 0:
            e = offline_sigma * noise_rng(scenario.seed, _STREAM_OFFLINE, k).standard_normal(6)
            pose = pose.retract(np.concatenate([e[:3], 0.1 * e[3:]]))
        offline.append((t, pose))
    return Dataset(scenario, scans, imu, gt, offline)


def write_dataset(dataset: Dataset, out_dir: os.PathLike) -> Path:
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    for i, scan in enumerate(dataset.scans):
        write_scan(out / "scans" / f"{i:06d}.scn", scan)
    write_imu_csv(out / "imu.csv", dataset.imu)
    write_trajectory(out / "gt.txt", dataset.ground_truth)
    write_trajectory(out / "poses.txt", dataset.offline)
    sc = dataset.scenario
    start = dataset.start_pose.translation
    with open(out / "scenario.txt", "w") as fh:
        fh.write(f"name = {sc.name}\nseed = {sc.seed}\nsize_S = {sc.size_S!r}\n")
        fh.write(f"frame_rate = {sc.trajectory.frame_rate!r}\nframes = {len(dataset.scans)}\n")
        fh.write(f"start = {start[0]!r},{start[1]!r},{start[2]!r}\n")
    return out
