"""Global pose initialization by branch-and-bound over a max-pooled occupancy pyramid.

Search is over (x, y, yaw) on a regular lattice around a coarse position.
Scores are counted in integers (hits per scan point) so that bounds and
exact scores compare without rounding, which makes the search return exactly
the exhaustive maximizer, ties included.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptySlice, NoInitialPose
from .geometry import PoseSE3

log = logging.getLogger(__name__)

DEFAULT_RES = 0.25
DEFAULT_LEVELS = 6
DEFAULT_SLICE = (0.3, 2.0)
GROUND_PERCENTILE = 5.0
BASE_SCORES = (0.6, 0.3)


def slice_points(points: np.ndarray, z_slice=DEFAULT_SLICE) -> np.ndarray:
    """xy of the points inside a height band measured from the local ground."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return np.zeros((0, 2))
    ground = np.percentile(points[:, 2], GROUND_PERCENTILE)
    z = points[:, 2] - ground
    keep = (z >= z_slice[0]) & (z <= z_slice[1])
    return points[keep, :2]


@dataclass(eq=False)
class ScorePyramid:
    origin: np.ndarray  # world xy of the corner of level-0 cell (0, 0)
    resolution: float
    levels: list  # level i: uint8 grid indexed [ix, iy] with cell size resolution * 2**i

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def cell_size(self, level: int) -> float:
        return self.resolution * 2**level

    def values(self, level: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
        grid = self.levels[level]
        ok = (ix >= 0) & (iy >= 0) & (ix < grid.shape[0]) & (iy < grid.shape[1])
        out = np.zeros(np.shape(ix), dtype=np.int64)
        out[ok] = grid[ix[ok], iy[ok]]
        return out


def max_pool(grid: np.ndarray) -> np.ndarray:
    nx, ny = grid.shape
    padded = np.zeros((nx + nx % 2, ny + ny % 2), dtype=grid.dtype)
    padded[:nx, :ny] = grid
    return np.maximum.reduce(
        [padded[0::2, 0::2], padded[1::2, 0::2], padded[0::2, 1::2], padded[1::2, 1::2]]
    )


def build_pyramid_from_xy(xy: np.ndarray, resolution: float, levels: int, margin: int = 2) -> ScorePyramid:
    if len(xy) == 0:
        raise EmptySlice("no map points inside the height slice")
    lo = np.floor(xy.min(axis=0) / resolution) - margin
    origin = lo * resolution
    idx = np.floor((xy - origin) / resolution).astype(np.int64)
    shape = idx.max(axis=0) + margin + 1
    grid = np.zeros(tuple(shape), dtype=np.uint8)
    grid[idx[:, 0], idx[:, 1]] = 1
    out = [grid]
    for _ in range(levels):
        out.append(max_pool(out[-1]))
    return ScorePyramid(origin, resolution, out)


def build_pyramid(block, resolution: float = DEFAULT_RES, levels: int = DEFAULT_LEVELS, z_slice=DEFAULT_SLICE) -> ScorePyramid:
    """Occupancy pyramid of a block (or raw point array) sliced to a height band."""
    if levels < 1 or resolution <= 0:
        raise ValueError("need levels >= 1 and resolution > 0")
    points = getattr(block, "points", block)
    return build_pyramid_from_xy(slice_points(points, z_slice), resolution, levels)


def _rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def score(pose: Sequence[float], scan_xy: np.ndarray, pyramid: ScorePyramid, level: int = 0) -> float:
    """Mean grid value under the scan points placed at (x, y, theta)."""
    scan_xy = np.asarray(scan_xy, dtype=float)
    x, y, th = pose
    w = scan_xy @ _rot2(th).T + (x, y)
    idx = np.floor((w - pyramid.origin) / pyramid.cell_size(level)).astype(np.int64)
    return float(pyramid.values(level, idx[:, 0], idx[:, 1]).sum()) / len(scan_xy)


@dataclass
class SearchWindow:
    center: tuple  # (x, y, theta)
    half_x: float
    half_y: float
    half_theta: float
    linear_step: float
    angular_step: float

    @property
    def wx(self) -> int:
        return int(math.ceil(self.half_x / self.linear_step - 1e-9))

    @property
    def wy(self) -> int:
        return int(math.ceil(self.half_y / self.linear_step - 1e-9))

    @property
    def wtheta(self) -> int:
        if self.half_theta <= 0:
            return 0
        return int(math.ceil(self.half_theta / self.angular_step - 1e-9))

    @property
    def size(self) -> int:
        return (2 * self.wx + 1) * (2 * self.wy + 1) * (2 * self.wtheta + 1)

    def pose(self, jx: int, jy: int, jt: int) -> tuple[float, float, float]:
        x0, y0, t0 = self.center
        return (x0 + self.linear_step * jx, y0 + self.linear_step * jy, t0 + self.angular_step * jt)


def angular_step_for(resolution: float, max_range: float) -> float:
    """Angle that moves a point at ``max_range`` by at most one cell."""
    d = max(max_range, resolution)
    return math.acos(max(-1.0, 1.0 - resolution**2 / (2.0 * d * d)))


@dataclass
class InitCandidate:
    pose: tuple
    score: float
    index: tuple  # (jx, jy, jtheta)
    hits: int = 0
    nodes: int = 0


def tie_key(jx: int, jy: int, jt: int) -> tuple:
    return (abs(jt), abs(jx), abs(jy), jt, jx, jy)


def _closest_to_zero(lo: int, hi: int) -> int:
    if lo <= 0 <= hi:
        return 0
    return lo if abs(lo) <= abs(hi) else hi


def _min_key(jt: int, x0: int, x1: int, y0: int, y1: int) -> tuple:
    return tie_key(_closest_to_zero(x0, x1), _closest_to_zero(y0, y1), jt)


class _RotatedScan:
    """Level-0 cell indices of the scan at one rotation, before translation."""

    def __init__(self, pyramid: ScorePyramid, scan_xy: np.ndarray, window: SearchWindow, jt: int):
        x0, y0, t0 = window.center
        th = t0 + window.angular_step * jt
        w = scan_xy @ _rot2(th).T + (x0, y0)
        u = (w - pyramid.origin) / pyramid.resolution
        # with the linear step equal to the cell size, a shift by j steps adds j to the index
        self.ix = np.floor(u[:, 0]).astype(np.int64)
        self.iy = np.floor(u[:, 1]).astype(np.int64)

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ix, self.iy


def _bound(pyr: ScorePyramid, base: tuple[np.ndarray, np.ndarray], level: int, x0: int, y0: int) -> int:
    """Upper bound on hits over translations [x0, x0 + 2^level) x [y0, y0 + 2^level)."""
    bx, by = base
    step = 1 << level
    ux, uy = bx + x0, by + y0
    lox, hix = ux >> level, (ux + step - 1) >> level
    loy, hiy = uy >> level, (uy + step - 1) >> level
    v = np.maximum(
        np.maximum(pyr.values(level, lox, loy), pyr.values(level, hix, loy)),
        np.maximum(pyr.values(level, lox, hiy), pyr.values(level, hix, hiy)),
    )
    return int(v.sum())


def bbs_search(
    scan_xy: np.ndarray,
    pyramid: ScorePyramid,
    window: SearchWindow,
    base_score: float = 0.6,
) -> InitCandidate:
    """Depth-first branch and bound returning the best lattice pose scoring above ``base_score``.

    Equal scores go to the pose closest to the window center under
    :func:`tie_key`. Requires the linear step to equal the pyramid resolution.
    """
    scan_xy = np.asarray(scan_xy, dtype=float)
    if len(scan_xy) == 0:
        raise ValueError("empty scan")
    if not 0.0 <= base_score < 1.0:
        raise ValueError("base_score must lie in [0, 1)")
    if abs(window.linear_step - pyramid.resolution) > 1e-12:
        raise ValueError("linear step must equal the pyramid resolution")
    n = len(scan_xy)
    wx, wy, wt = window.wx, window.wy, window.wtheta
    top = pyramid.depth
    best_hits = int(math.floor(base_score * n + 1e-12))
    best_key: Optional[tuple] = None
    best_idx: Optional[tuple] = None
    nodes = 0

    def pruned(bound: int, key: tuple) -> bool:
        if bound < best_hits:
            return True
        if bound == best_hits:
            return best_key is None or key > best_key
        return False

    roots = []
    bases = {}
    for jt in range(-wt, wt + 1):
        rs = _RotatedScan(pyramid, scan_xy, window, jt)
        base = rs.cells()
        bases[jt] = base
        for x0 in range(-wx, wx + 1, 1 << top):
            for y0 in range(-wy, wy + 1, 1 << top):
                nodes += 1
                roots.append((_bound(pyramid, base, top, x0, y0), jt, x0, y0))
    roots.sort(key=lambda r: (-r[0], tie_key(r[2], r[3], r[1])))

    for bound, jt, x0, y0 in roots:
        x1, y1 = min(x0 + (1 << top) - 1, wx), min(y0 + (1 << top) - 1, wy)
        if pruned(bound, _min_key(jt, x0, x1, y0, y1)):
            continue
        base = bases[jt]
        stack = [(bound, top, x0, y0)]
        while stack:
            b, level, ax, ay = stack.pop()
            sx, sy = min(ax + (1 << level) - 1, wx), min(ay + (1 << level) - 1, wy)
            if pruned(b, _min_key(jt, ax, sx, ay, sy)):
                continue
            if level == 0:
                key = tie_key(ax, ay, jt)
                if b > best_hits or (b == best_hits and best_key is not None and key < best_key):
                    best_hits, best_key, best_idx = b, key, (ax, ay, jt)
                continue
            half = 1 << (level - 1)
            children = []
            for cx in (ax, ax + half):
                if cx > wx:
                    continue
                for cy in (ay, ay + half):
                    if cy > wy:
                        continue
                    nodes += 1
                    children.append((_bound(pyramid, base, level - 1, cx, cy), level - 1, cx, cy))
            # highest bound on top of the stack; among equals the one nearest the center
            children.sort(key=lambda c: (c[0], tuple(-v for v in _min_key(jt, c[2], c[2], c[3], c[3]))))
            stack.extend(children)
    if best_idx is None:
        raise NoInitialPose(f"no pose in the window scores above {base_score}")
    jx, jy, jt = best_idx
    return InitCandidate(window.pose(jx, jy, jt), best_hits / n, best_idx, best_hits, nodes)


def exhaustive_search(scan_xy: np.ndarray, pyramid: ScorePyramid, window: SearchWindow, base_score: float = 0.0) -> InitCandidate:
    """Score every lattice pose; reference for :func:`bbs_search`."""
    scan_xy = np.asarray(scan_xy, dtype=float)
    n = len(scan_xy)
    wx, wy, wt = window.wx, window.wy, window.wtheta
    jxs = np.arange(-wx, wx + 1)
    jys = np.arange(-wy, wy + 1)
    best = None
    for jt in range(-wt, wt + 1):
        rs = _RotatedScan(pyramid, scan_xy, window, jt)
        bx, by = rs.cells()
        ix = bx[None, None, :] + jxs[:, None, None]
        iy = by[None, None, :] + jys[None, :, None]
        ix, iy = np.broadcast_arrays(ix, iy)
        hits = pyramid.values(0, ix, iy).sum(axis=2)
        for a, jx in enumerate(jxs):
            for b, jy in enumerate(jys):
                h = int(hits[a, b])
                key = tie_key(int(jx), int(jy), jt)
                if best is None or h > best[0] or (h == best[0] and key < best[1]):
                    best = (h, key, (int(jx), int(jy), jt))
    h, _, idx = best
    if h <= math.floor(base_score * n + 1e-12):
        raise NoInitialPose(f"no pose in the window scores above {base_score}")
    return InitCandidate(window.pose(*idx), h / n, idx, h, window.size)


def prepare_scan(points: np.ndarray, resolution: float, z_slice=DEFAULT_SLICE) -> np.ndarray:
    """Sliced scan xy, thinned to one point per cell (mean of the cell)."""
    xy = slice_points(points, z_slice)
    if len(xy) == 0:
        raise EmptySlice("no scan points inside the height slice")
    keys = np.floor(xy / resolution).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    cnt = np.bincount(inv)
    return np.column_stack([np.bincount(inv, weights=xy[:, k]) / cnt for k in range(2)])


def lift_height(
    map_points: np.ndarray, scan_points: np.ndarray, xy: Sequence[float], radius: float = 2.0, min_points: int = 10
) -> float:
    """Sensor height that puts the scan's ground level on the map's ground level around ``xy``.

    Both ground levels are the low percentile of z within the same horizontal
    radius; the radius doubles (up to 8x) until the scan has points inside it,
    since a tilted-beam lidar sees no ground right under the sensor.
    """
    map_points = np.asarray(map_points, dtype=float)
    scan_points = np.asarray(scan_points, dtype=float)
    dm = np.linalg.norm(map_points[:, :2] - np.asarray(xy[:2], dtype=float), axis=1)
    ds = np.linalg.norm(scan_points[:, :2], axis=1)
    for k in range(4):
        r = radius * 2**k
        m, s = map_points[dm <= r, 2], scan_points[ds <= r, 2]
        if len(m) >= min_points and len(s) >= min_points:
            return float(np.percentile(m, GROUND_PERCENTILE) - np.percentile(s, GROUND_PERCENTILE))
    return float(np.percentile(map_points[:, 2], GROUND_PERCENTILE) - np.percentile(scan_points[:, 2], GROUND_PERCENTILE))


@dataclass
class InitResult:
    pose: PoseSE3
    candidate: InitCandidate
    bm_id: int
    base_score: float


def initialize_pose(
    coarse: Sequence[float],
    library_client,
    scan,
    window_size: float = 40.0,
    resolution: float = DEFAULT_RES,
    levels: int = DEFAULT_LEVELS,
    max_range: Optional[float] = None,
    base_scores: Sequence[float] = BASE_SCORES,
) -> InitResult:
    """Fetch the block nearest ``coarse`` and search a square window around it over all headings."""
    points = np.asarray(getattr(scan, "points", scan), dtype=float)
    bm_id, _, _ = library_client.query(coarse)
    block = library_client.fetch(bm_id)
    pyramid = build_pyramid(block, resolution, levels)
    scan_xy = prepare_scan(points, resolution)
    if max_range is None:
        max_range = float(np.max(np.linalg.norm(scan_xy, axis=1)))
    dtheta = angular_step_for(resolution, max_range)
    window = SearchWindow((float(coarse[0]), float(coarse[1]), 0.0), window_size / 2, window_size / 2, math.pi, resolution, dtheta)
    err = None
    for s0 in base_scores:
        try:
            cand = bbs_search(scan_xy, pyramid, window, s0)
        except NoInitialPose as e:
            log.info("no initial pose above base score %.2f", s0)
            err = e
            continue
        x, y, th = cand.pose
        z = lift_height(block.points, points, (x, y))
        return InitResult(PoseSE3.from_xyz_yaw(x, y, z, th), cand, bm_id, s0)
    raise err
