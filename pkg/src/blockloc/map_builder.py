"""Block-map generation from pose-tagged scans.

Scans are reprojected through the lidar extrinsics and the offline pose that
is closest in time, then accumulated into a candidate block until the robot
has moved more than ``size_S`` away from the candidate's anchor position.
Finished candidates are kept, merged into their nearest block, or dropped,
depending on how close their centroid is to the centroids already stored.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cloud import voxel_downsample
from .errors import NoBlocks, NoInput, PoseGap
from .geometry import PoseSE3

log = logging.getLogger(__name__)

STORE_RATIO = 0.5
DISCARD_RATIO = 0.1


@dataclass
class KeyedScan:
    stamp: float
    points: np.ndarray


@dataclass
class OfflinePose:
    stamp: float
    pose: PoseSE3


@dataclass(eq=False)
class BlockMap:
    id: int
    points: np.ndarray
    centroid: np.ndarray
    size_S: float

    @classmethod
    def from_points(cls, bm_id: int, points: np.ndarray, size_S: float) -> "BlockMap":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(bm_id, points, points.mean(axis=0), float(size_S))


def _euclid(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one formula for every centroid distance so tree and linear scan agree bitwise
    d = np.atleast_2d(a) - b
    return np.sqrt(np.sum(d * d, axis=-1))


class MapLibrary:
    """Stored block maps plus a KD-tree over their centroids."""

    def __init__(self, blocks: Iterable[BlockMap] = ()):
        self.blocks: list[BlockMap] = list(blocks)
        self.stats: Optional[BuildStats] = None
        self._rebuild_index()

    def _rebuild_index(self) -> None:
        if self.blocks:
            self.centroids = np.array([b.centroid for b in self.blocks], dtype=float)
            self.ids = np.array([b.id for b in self.blocks], dtype=np.int64)
            self.centroid_index = cKDTree(self.centroids)
        else:
            self.centroids = np.zeros((0, 3))
            self.ids = np.zeros(0, dtype=np.int64)
            self.centroid_index = None

    def __len__(self) -> int:
        return len(self.blocks)

    def get(self, bm_id: int) -> BlockMap:
        for b in self.blocks:
            if b.id == bm_id:
                return b
        raise KeyError(bm_id)

    def add(self, block: BlockMap) -> None:
        self.blocks.append(block)
        self._rebuild_index()

    def replace(self, block: BlockMap) -> None:
        for i, b in enumerate(self.blocks):
            if b.id == block.id:
                self.blocks[i] = block
                break
        else:
            raise KeyError(block.id)
        self._rebuild_index()

    def nearest(self, position: Sequence[float]) -> tuple[int, float]:
        return nearest_block(self, position)


def nearest_block(library: MapLibrary, position: Sequence[float]) -> tuple[int, float]:
    """Block whose centroid is closest to ``position``; ties go to the lower id."""
    if len(library) == 0:
        raise NoBlocks("library holds no block maps")
    position = np.asarray(position, dtype=float)
    k = min(len(library), 8)
    _, rows = library.centroid_index.query(position, k=k)
    rows = np.atleast_1d(rows)
    d = _euclid(position, library.centroids[rows])
    best = d.min()
    tied = rows[d == best]
    return int(library.ids[tied].min()), float(best)


def nearest_block_linear(library: MapLibrary, position: Sequence[float]) -> tuple[int, float]:
    """Exhaustive scan over every centroid (test oracle and tiny libraries)."""
    if len(library) == 0:
        raise NoBlocks("library holds no block maps")
    d = _euclid(np.asarray(position, dtype=float), library.centroids)
    best = d.min()
    return int(library.ids[d == best].min()), float(best)


@dataclass
class BuildStats:
    scans: int = 0
    skipped_pose_gap: int = 0
    stored: int = 0
    merged: int = 0
    discarded: int = 0
    # (candidate number, action, distance or None, target block id)
    decisions: list = field(default_factory=list)


def finalize_candidate(
    candidate: BlockMap, library: MapLibrary, size_S: float, stats: Optional[BuildStats] = None
) -> MapLibrary:
    """Store, merge or discard a finished candidate (library must hold >= 2 blocks)."""
    stats = stats if stats is not None else BuildStats()
    nth = len(stats.decisions)
    n_id, d = nearest_block(library, candidate.centroid)
    if d >= STORE_RATIO * size_S:
        block = BlockMap(len(library), candidate.points, candidate.centroid, size_S)
        library.add(block)
        stats.stored += 1
        stats.decisions.append((nth, "store", d, block.id))
    elif d > DISCARD_RATIO * size_S:
        target = library.get(n_id)
        merged = BlockMap.from_points(n_id, np.vstack([target.points, candidate.points]), size_S)
        library.replace(merged)
        stats.merged += 1
        stats.decisions.append((nth, "merge", d, n_id))
    else:
        stats.discarded += 1
        stats.decisions.append((nth, "discard", d, n_id))
    return library


class BlockMapBuilder:
    """Incremental form of :func:`generate_block_maps` (one scan at a time)."""

    def __init__(
        self,
        poses: Sequence[OfflinePose],
        extrinsics: PoseSE3,
        size_S: float,
        max_stamp_gap: float = 0.1,
        scan_leaf: Optional[float] = None,
        strict: bool = False,
    ):
        if size_S <= 0:
            raise ValueError("size_S must be positive")
        if not poses:
            raise NoInput("no offline poses")
        self.stamps = np.array([p.stamp for p in poses], dtype=float)
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("offline pose stamps must be strictly increasing")
        self.poses = list(poses)
        self.lidar_to_off = extrinsics.inverse()
        self.size_S = float(size_S)
        self.max_stamp_gap = max_stamp_gap
        self.scan_leaf = scan_leaf
        self.strict = strict
        self.library = MapLibrary()
        self.stats = BuildStats()
        self.library.stats = self.stats
        self._anchor: Optional[np.ndarray] = None
        self._parts: list[np.ndarray] = []

    def closest_pose(self, stamp: float) -> Optional[PoseSE3]:
        i = int(np.searchsorted(self.stamps, stamp))
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(self.stamps):
                gap = abs(self.stamps[j] - stamp)
                if best is None or gap < best[0]:
                    best = (gap, j)
        if best[0] > self.max_stamp_gap:
            return None
        return self.poses[best[1]].pose

    def add_scan(self, scan: KeyedScan) -> None:
        self.stats.scans += 1
        pose = self.closest_pose(scan.stamp)
        if pose is None:
            if self.strict:
                raise PoseGap(f"no offline pose within {self.max_stamp_gap} s of scan at {scan.stamp}")
            self.stats.skipped_pose_gap += 1
            log.warning("scan at %.6f skipped: no pose within %.3f s", scan.stamp, self.max_stamp_gap)
            return
        pts = np.asarray(scan.points, dtype=float)
        if self.scan_leaf:
            pts = voxel_downsample(pts, self.scan_leaf)
        world_from_lidar = pose @ self.lidar_to_off
        t = pose.translation
        if self._anchor is None:
            self._anchor = t.copy()
            self._parts = []
        if float(np.linalg.norm(self._anchor - t)) <= self.size_S:
            self._parts.append(world_from_lidar.transform_points(pts))
        else:
            # the scan that crosses the boundary only moves the anchor
            self._anchor = t.copy()
            self._close_candidate()

    def _close_candidate(self) -> None:
        if not self._parts:
            return
        cand = BlockMap.from_points(-1, np.vstack(self._parts), self.size_S)
        self._parts = []
        if len(self.library) < 2:
            cand.id = len(self.library)
            self.library.add(cand)
            self.stats.stored += 1
            self.stats.decisions.append((len(self.stats.decisions), "store", None, cand.id))
        else:
            finalize_candidate(cand, self.library, self.size_S, self.stats)

    def finish(self) -> MapLibrary:
        self._close_candidate()
        return self.library


def generate_block_maps(
    scans: Iterable[KeyedScan],
    poses: Sequence[OfflinePose],
    extrinsics: PoseSE3,
    size_S: float,
    max_stamp_gap: float = 0.1,
    scan_leaf: Optional[float] = None,
    strict: bool = False,
) -> MapLibrary:
    builder = BlockMapBuilder(poses, extrinsics, size_S, max_stamp_gap, scan_leaf, strict)
    for scan in scans:
        builder.add_scan(scan)
    if builder.stats.scans == 0:
        raise NoInput("empty scan stream")
    return builder.finish()


def downsample_library(library: MapLibrary, leaf: float = 0.25) -> MapLibrary:
    """Voxel-downsample every block; centroids are recomputed from the kept points."""
    blocks = [BlockMap.from_points(b.id, voxel_downsample(b.points, leaf), b.size_S) for b in library.blocks]
    out = MapLibrary(blocks)
    out.stats = library.stats
    return out
