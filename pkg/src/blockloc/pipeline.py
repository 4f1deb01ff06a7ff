"""End-to-end glue: offline map building and online localization runs."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .deskew import RawScan, deskew_scan, estimate_twist
from .errors import NearPiRotation, NoInitialPose, NoInput, TrackingLost
from .geometry import PoseSE3
from .global_init import initialize_pose
from .map_builder import BlockMapBuilder, KeyedScan, MapLibrary, OfflinePose, downsample_library
from .ndt import build_ndt_grid
from .tracker import FrameRecord, Tracker, TrackerConfig

log = logging.getLogger(__name__)

LIBRARY_LEAF = 0.25


def _pose_at(stamps: np.ndarray, poses: Sequence[OfflinePose], t: float, max_gap: float) -> Optional[PoseSE3]:
    i = int(np.argmin(np.abs(stamps - t)))
    return poses[i].pose if abs(stamps[i] - t) <= max_gap else None


def deskew_with_poses(scan: RawScan, stamps: np.ndarray, poses: Sequence[OfflinePose], max_gap: float = 0.1) -> np.ndarray:
    """Deskew a sweep using the constant twist between the offline poses at its start and end."""
    a = _pose_at(stamps, poses, scan.t_start, max_gap)
    b = _pose_at(stamps, poses, scan.t_end, max_gap)
    if a is None or b is None or a is b:
        return scan.points
    try:
        twist = estimate_twist(a, b)
    except NearPiRotation:
        return scan.points
    return deskew_scan(scan, twist).points


def build_library(
    scans: Iterable[RawScan],
    poses: Sequence[tuple[float, PoseSE3]],
    size_S: float,
    extrinsics: Optional[PoseSE3] = None,
    max_stamp_gap: float = 0.1,
    leaf: float = LIBRARY_LEAF,
    strict: bool = False,
) -> MapLibrary:
    offline = [OfflinePose(t, p) for t, p in poses]
    stamps = np.array([p.stamp for p in offline])
    builder = BlockMapBuilder(offline, extrinsics or PoseSE3.identity(), size_S, max_stamp_gap, strict=strict)
    n = 0
    for scan in scans:
        n += 1
        pts = deskew_with_poses(scan, stamps, offline, max_stamp_gap)
        builder.add_scan(KeyedScan(scan.t_start, pts))
    if n == 0:
        raise NoInput("empty scan stream")
    return downsample_library(builder.finish(), leaf)


@dataclass
class LocalizationRun:
    records: list = field(default_factory=list)
    init: object = None
    switches: int = 0
    lost: Optional[TrackingLost] = None
    server_failures: int = 0
    tracker: Optional[Tracker] = None

    def trajectory(self) -> list[tuple[float, PoseSE3]]:
        return [(r.stamp, r.pose) for r in self.records]


def run_localization(
    scans: Sequence[RawScan],
    imu,
    client,
    size_S: Optional[float] = None,
    init_pose: Optional[PoseSE3] = None,
    coarse: Optional[Sequence[float]] = None,
    config: Optional[TrackerConfig] = None,
    monolithic: Optional[MapLibrary] = None,
    window_size: float = 40.0,
    raise_on_lost: bool = True,
) -> LocalizationRun:
    """Track ``scans`` against block maps served by ``client``.

    With ``monolithic`` the whole library is merged into one fixed grid and
    no block switching happens. ``size_S`` defaults to the one stored in
    the served blocks. Without ``init_pose`` the first sweep is
    placed by global initialization around ``coarse``.
    """
    cfg = config or TrackerConfig()
    scans = list(scans)
    if not scans:
        raise NoInput("no sweeps to localize")
    run = LocalizationRun()
    if init_pose is None:
        if coarse is None:
            raise NoInitialPose("neither an initial pose nor a coarse position was given")
        res = initialize_pose(coarse, client, scans[0], window_size)
        run.init = res
        init_pose = res.pose
    if monolithic is not None:
        pts = np.vstack([b.points for b in monolithic.blocks])
        size_S = size_S or monolithic.blocks[0].size_S
        tracker = Tracker(imu, build_ndt_grid(pts, cfg.ndt_voxel), -1, None, size_S, cfg)
    else:
        bm_id, _, _ = client.query(init_pose.translation)
        block = client.fetch(bm_id)
        size_S = size_S or block.size_S
        tracker = Tracker(imu, build_ndt_grid(block.points, cfg.ndt_voxel), bm_id, client, size_S, cfg)
        tracker.known_centroids[bm_id] = np.asarray(block.centroid, dtype=float)
    run.tracker = tracker
    try:
        tracker.initialize(init_pose, scans[0])
        for scan in scans[1:]:
            tracker.process_frame(scan)
    except TrackingLost as exc:
        run.lost = exc
        if raise_on_lost:
            run.records = tracker.history
            raise
    finally:
        tracker.join()
    run.records = tracker.history
    run.switches = tracker.switches
    run.server_failures = tracker.server_failures
    return run


TIMING_COLUMNS = ("stamp", "update_ms", "window_size", "bm_id", "switched")


def write_timing_csv(path: os.PathLike, records: Sequence[FrameRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_COLUMNS)
        for r in records:
            w.writerow([f"{r.stamp:.9f}", f"{r.update_ms:.3f}", r.window_size, r.bm_id, int(r.switched)])


def read_timing_csv(path: os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "stamp": float(r["stamp"]),
            "update_ms": float(r["update_ms"]),
            "window_size": int(r["window_size"]),
            "bm_id": int(r["bm_id"]),
            "switched": bool(int(r["switched"])),
        }
        for r in rows
    ]
