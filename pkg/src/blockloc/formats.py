"""On-disk formats: block maps, scans, trajectories, IMU logs and the library index.

All binary formats are little-endian.

``.bmap``  magic ``BMAP``, u32 version (1), u32 id, f32 size_S, f32[3] centroid,
           u64 point_count, then point_count x f32[3].
``.scn``   magic ``SCN1``, f64 t_start, f64 t_end, u64 n, then n x (f32 x, y, z, t_rel).
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .deskew import RawScan
from .errors import FormatError
from .geometry import PoseSE3
from .imu_preint import ImuSample
from .map_builder import BlockMap, MapLibrary

BMAP_MAGIC = b"BMAP"
BMAP_VERSION = 1
_BMAP_HEADER = struct.Struct("<4sIIf3fQ")

SCAN_MAGIC = b"SCN1"
_SCAN_HEADER = struct.Struct("<4sddQ")

INDEX_NAME = "library.idx"


def encode_bmap(block: BlockMap) -> bytes:
    pts = np.ascontiguousarray(block.points, dtype="<f4")
    header = _BMAP_HEADER.pack(
        BMAP_MAGIC,
        BMAP_VERSION,
        block.id,
        block.size_S,
        *np.asarray(block.centroid, dtype=np.float32).tolist(),
        len(pts),
    )
    return header + pts.tobytes()


def decode_bmap(data: bytes) -> BlockMap:
    if len(data) < _BMAP_HEADER.size:
        raise FormatError("truncated .bmap header")
    magic, version, bm_id, size_s, cx, cy, cz, n = _BMAP_HEADER.unpack_from(data)
    if magic != BMAP_MAGIC:
        raise FormatError(f"bad .bmap magic {magic!r}")
    if version != BMAP_VERSION:
        raise FormatError(f"unsupported .bmap version {version}")
    expected = _BMAP_HEADER.size + 12 * n
    if len(data) != expected:
        raise FormatError(f".bmap length {len(data)} does not match {n} points")
    pts = np.frombuffer(data, dtype="<f4", offset=_BMAP_HEADER.size, count=3 * n).reshape(n, 3)
    return BlockMap(
        id=bm_id,
        points=pts.astype(np.float64),
        centroid=np.array([cx, cy, cz], dtype=np.float64),
        size_S=float(size_s),
    )


def encode_scan(scan: RawScan) -> bytes:
    rec = np.empty((len(scan.points), 4), dtype="<f4")
    rec[:, :3] = scan.points
    rec[:, 3] = scan.t_rel
    return _SCAN_HEADER.pack(SCAN_MAGIC, scan.t_start, scan.t_end, len(rec)) + rec.tobytes()


def decode_scan(data: bytes) -> RawScan:
    if len(data) < _SCAN_HEADER.size:
        raise FormatError("truncated scan header")
    magic, t0, t1, n = _SCAN_HEADER.unpack_from(data)
    if magic != SCAN_MAGIC:
        raise FormatError(f"bad scan magic {magic!r}")
    if len(data) != _SCAN_HEADER.size + 16 * n:
        raise FormatError(f"scan length {len(data)} does not match {n} points")
    rec = np.frombuffer(data, dtype="<f4", offset=_SCAN_HEADER.size, count=4 * n).reshape(n, 4)
    return RawScan(t0, t1, rec[:, :3].astype(np.float64), rec[:, 3].astype(np.float64))


def write_scan(path: os.PathLike, scan: RawScan) -> None:
    Path(path).write_bytes(encode_scan(scan))


def read_scan(path: os.PathLike) -> RawScan:
    return decode_scan(Path(path).read_bytes())


def scan_paths(directory: os.PathLike) -> list[Path]:
    return sorted(Path(directory).glob("*.scn"))


def iter_scans(directory: os.PathLike) -> Iterator[RawScan]:
    for p in scan_paths(directory):
        yield read_scan(p)


# ---------------------------------------------------------------------------
# trajectories (TUM convention)


def format_pose_line(stamp: float, pose: PoseSE3) -> str:
    t = pose.translation
    q = pose.rotation
    return (
        f"{stamp:.9f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
        f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}"
    )


def write_trajectory(path: os.PathLike, entries: Iterable[tuple[float, PoseSE3]]) -> None:
    lines = [format_pose_line(s, p) for s, p in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def parse_trajectory(text: str) -> list[tuple[float, PoseSE3]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"trajectory line {lineno}: expected 8 fields, got {len(parts)}")
        v = [float(x) for x in parts]
        out.append((v[0], PoseSE3(v[4:8], v[1:4])))
    return out


def read_trajectory(path: os.PathLike) -> list[tuple[float, PoseSE3]]:
    return parse_trajectory(Path(path).read_text())


# ---------------------------------------------------------------------------
# IMU CSV: t,ax,ay,az,gx,gy,gz

IMU_HEADER = "t,ax,ay,az,gx,gy,gz"


def write_imu_csv(path: os.PathLike, samples: Iterable[ImuSample]) -> None:
    rows = [IMU_HEADER]
    for s in samples:
        vals = [s.stamp, *s.accel, *s.gyro]
        rows.append(",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(rows) + "\n")


def read_imu_csv(path: os.PathLike) -> list[ImuSample]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != IMU_HEADER:
        raise FormatError(f"IMU CSV must start with header '{IMU_HEADER}'")
    out = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        v = [float(x) for x in line.split(",")]
        if len(v) != 7:
            raise FormatError(f"IMU CSV line {lineno}: expected 7 fields")
        out.append(ImuSample(v[0], np.array(v[1:4]), np.array(v[4:7])))
    return out


# ---------------------------------------------------------------------------
# block-map library directory


def bmap_filename(bm_id: int) -> str:
    return f"bm_{bm_id}.bmap"


def save_library(library: MapLibrary, directory: os.PathLike) -> Path:
    """Write one ``.bmap`` per block plus ``library.idx``.

    The index line for each block carries the float32 centroid exactly as it
    is stored in the block file, so a library read back from disk indexes the
    same centroids the server answers with.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for block in library.blocks:
        name = bmap_filename(block.id)
        (directory / name).write_bytes(encode_bmap(block))
        c = np.asarray(block.centroid, dtype=np.float32)
        cx, cy, cz = (repr(float(v)) for v in c)
        lines.append(f"{block.id} {cx} {cy} {cz} {len(block.points)} {name}")
    (directory / INDEX_NAME).write_text("\n".join(lines) + ("\n" if lines else ""))
    return directory / INDEX_NAME


def read_index(directory: os.PathLike) -> list[tuple[int, np.ndarray, int, str]]:
    """Parse ``library.idx`` into (id, centroid, point_count, filename) rows."""
    path = Path(directory) / INDEX_NAME
    if not path.exists():
        raise FormatError(f"missing {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{INDEX_NAME} line {lineno}: expected 6 fields")
        try:
            bm_id = int(parts[0])
            centroid = np.array([float(np.float32(x)) for x in parts[1:4]])
            count = int(parts[4])
        except ValueError as exc:
            raise FormatError(f"{INDEX_NAME} line {lineno}: {exc}") from None
        if not np.all(np.isfinite(centroid)) or count < 0:
            raise FormatError(f"{INDEX_NAME} line {lineno}: invalid values")
        rows.append((bm_id, centroid, count, parts[5]))
    ids = [r[0] for r in rows]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{INDEX_NAME}: duplicate block ids")
    return rows


def load_library(directory: os.PathLike) -> MapLibrary:
    directory = Path(directory)
    blocks = []
    for bm_id, _, _, name in read_index(directory):
        block = decode_bmap((directory / name).read_bytes())
        if block.id != bm_id:
            raise FormatError(f"{name}: id {block.id} does not match index id {bm_id}")
        blocks.append(block)
    return MapLibrary(blocks)
