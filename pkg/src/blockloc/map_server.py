"""Block-map retrieval service over length-prefixed binary frames.

Frame layout (little-endian): u32 length of everything after the length
field, u8 message type, payload.

    1  QUERY          3 x f64 position
    2  FETCH          u32 block id
    3  RESPONSE_META  u32 id, 3 x f64 centroid, f64 distance
    4  RESPONSE_BLOB  .bmap bytes
    15 ERROR          u8 code, UTF-8 message
"""

from __future__ import annotations

import logging
import math
import os
import socket
import socketserver
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError, NoBlocks, ServerError, ServerUnavailable
from .formats import decode_bmap, encode_bmap, read_index
from .map_builder import BlockMap, MapLibrary, nearest_block

log = logging.getLogger(__name__)

QUERY = 1
FETCH = 2
RESPONSE_META = 3
RESPONSE_BLOB = 4
ERROR = 15

BAD_REQUEST = 1
NOT_FOUND = 2
EMPTY_LIBRARY = 3

MAX_FRAME = 1 << 28
CACHE_BLOCKS = 8
DEFAULT_TIMEOUT = 2.0
TIMEOUT_ENV = "BLOCKLOC_SERVER_TIMEOUT_MS"

_LEN = struct.Struct("<I")
_QUERY = struct.Struct("<3d")
_FETCH = struct.Struct("<I")
_META = struct.Struct("<I3dd")


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes

    def encode(self) -> bytes:
        return _LEN.pack(1 + len(self.payload)) + bytes([self.msg_type]) + self.payload


def decode_frame(data: bytes) -> tuple[Frame, int]:
    """Decode one frame from the front of ``data``; returns (frame, bytes consumed)."""
    if len(data) < 5:
        raise FormatError("truncated frame")
    (n,) = _LEN.unpack_from(data)
    if n < 1 or len(data) < 4 + n:
        raise FormatError("frame length does not match data")
    return Frame(data[4], bytes(data[5:4 + n])), 4 + n


def query_frame(position: Sequence[float]) -> Frame:
    return Frame(QUERY, _QUERY.pack(*map(float, position)))


def fetch_frame(bm_id: int) -> Frame:
    return Frame(FETCH, _FETCH.pack(bm_id))


def meta_frame(bm_id: int, centroid: Sequence[float], distance: float) -> Frame:
    return Frame(RESPONSE_META, _META.pack(bm_id, *map(float, centroid), float(distance)))


def error_frame(code: int, message: str) -> Frame:
    return Frame(ERROR, bytes([code]) + message.encode("utf-8"))


def parse_meta(payload: bytes) -> tuple[int, np.ndarray, float]:
    if len(payload) != _META.size:
        raise FormatError("bad RESPONSE_META payload")
    bm_id, cx, cy, cz, d = _META.unpack(payload)
    return bm_id, np.array([cx, cy, cz]), d


def parse_error(payload: bytes) -> tuple[int, str]:
    if not payload:
        raise FormatError("empty ERROR payload")
    return payload[0], payload[1:].decode("utf-8", errors="replace")


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> Optional[Frame]:
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n < 1 or n > MAX_FRAME:
        raise FormatError(f"frame length {n} out of range")
    body = _recv_exact(sock, n)
    if body is None:
        return None
    return Frame(body[0], body[1:])


class _CentroidView:
    """Centroid index read from ``library.idx`` (no points loaded)."""

    def __init__(self, rows):
        self.rows = {r[0]: r for r in rows}
        self.ids = np.array([r[0] for r in rows], dtype=np.int64)
        self.centroids = np.array([r[1] for r in rows], dtype=float).reshape(-1, 3)
        self.centroid_index = cKDTree(self.centroids) if len(rows) else None

    def __len__(self) -> int:
        return len(self.ids)


class BlockStore:
    """Read-only library on disk with a small LRU cache of encoded blocks."""

    def __init__(self, library_dir: os.PathLike, cache_size: int = CACHE_BLOCKS):
        self.directory = Path(library_dir)
        self.index = _CentroidView(read_index(self.directory))
        self.cache_size = cache_size
        self._cache: OrderedDict[int, bytes] = OrderedDict()
        self._lock = threading.Lock()
        self.loads = 0

    def nearest(self, position) -> tuple[int, np.ndarray, float]:
        bm_id, d = nearest_block(self.index, position)
        return bm_id, self.index.rows[bm_id][1], d

    def blob(self, bm_id: int) -> bytes:
        with self._lock:
            if bm_id in self._cache:
                self._cache.move_to_end(bm_id)
                return self._cache[bm_id]
        row = self.index.rows.get(bm_id)
        if row is None:
            raise KeyError(bm_id)
        data = (self.directory / row[3]).read_bytes()
        block = decode_bmap(data)
        if block.id != bm_id:
            raise FormatError(f"{row[3]} holds id {block.id}, index says {bm_id}")
        with self._lock:
            self.loads += 1
            self._cache[bm_id] = data
            self._cache.move_to_end(bm_id)
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return data

    def cached_ids(self) -> list[int]:
        with self._lock:
            return list(self._cache)

    def respond(self, frame: Frame) -> Frame:
        if frame.msg_type == QUERY:
            if len(frame.payload) != _QUERY.size:
                return error_frame(BAD_REQUEST, "QUERY payload must be 3 x f64")
            pos = _QUERY.unpack(frame.payload)
            if not all(math.isfinite(v) for v in pos):
                return error_frame(BAD_REQUEST, "query position must be finite")
            try:
                bm_id, c, d = self.nearest(pos)
            except NoBlocks:
                return error_frame(EMPTY_LIBRARY, "library holds no block maps")
            return meta_frame(bm_id, c, d)
        if frame.msg_type == FETCH:
            if len(frame.payload) != _FETCH.size:
                return error_frame(BAD_REQUEST, "FETCH payload must be u32")
            (bm_id,) = _FETCH.unpack(frame.payload)
            try:
                return Frame(RESPONSE_BLOB, self.blob(bm_id))
            except KeyError:
                return error_frame(NOT_FOUND, f"no block with id {bm_id}")
        return error_frame(BAD_REQUEST, f"unknown message type {frame.msg_type}")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        store: BlockStore = self.server.store
        sock = self.request
        while True:
            try:
                frame = read_frame(sock)
            except FormatError as exc:
                sock.sendall(error_frame(BAD_REQUEST, str(exc)).encode())
                return
            except OSError:
                return
            if frame is None:
                return
            reply = store.respond(frame)
            log.info("%s type=%d -> type=%d", self.client_address, frame.msg_type, reply.msg_type)
            try:
                sock.sendall(reply.encode())
            except OSError:
                return


class MapServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, library_dir: os.PathLike, address: tuple[str, int] = ("127.0.0.1", 0)):
        self.store = BlockStore(library_dir)
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def start_server(library_dir: os.PathLike, addr: str = "127.0.0.1:0") -> tuple[MapServer, threading.Thread]:
    """Serve from a background thread; call ``server.shutdown()`` to stop."""
    server = MapServer(library_dir, parse_address(addr))
    thread = threading.Thread(target=server.serve_forever, name="map-server", daemon=True)
    thread.start()
    return server, thread


def serve(library_dir: os.PathLike, addr: str) -> None:
    server = MapServer(library_dir, parse_address(addr))
    log.info("serving %d blocks from %s on %s", len(server.store.index), library_dir, server.address)
    try:
        server.serve_forever()
    finally:
        server.server_close()


def client_timeout() -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    if raw:
        try:
            return float(raw) / 1000.0
        except ValueError:
            log.warning("ignoring non-numeric %s=%r", TIMEOUT_ENV, raw)
    return DEFAULT_TIMEOUT


class MapClient:
    """Blocking client holding one connection; safe to share between threads."""

    def __init__(self, address: str, timeout: Optional[float] = None):
        self.address = parse_address(address) if isinstance(address, str) else tuple(address)
        self.timeout = client_timeout() if timeout is None else timeout
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise ServerUnavailable(f"cannot reach map server at {self.address}: {exc}") from None
            self._sock.settimeout(self.timeout)
        return self._sock

    def close(self) -> None:
        with self._lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None

    def request(self, frame: Frame) -> Frame:
        with self._lock:
            sock = self._connect()
            try:
                sock.sendall(frame.encode())
                reply = read_frame(sock)
            except (OSError, FormatError) as exc:
                self._sock = None
                sock.close()
                raise ServerUnavailable(f"map server request failed: {exc}") from None
            if reply is None:
                self._sock = None
                sock.close()
                raise ServerUnavailable("map server closed the connection")
        if reply.msg_type == ERROR:
            raise ServerError(*parse_error(reply.payload))
        return reply

    def query(self, position: Sequence[float]) -> tuple[int, np.ndarray, float]:
        reply = self.request(query_frame(position))
        if reply.msg_type != RESPONSE_META:
            raise ServerUnavailable(f"unexpected reply type {reply.msg_type}")
        return parse_meta(reply.payload)

    def fetch_bytes(self, bm_id: int) -> bytes:
        reply = self.request(fetch_frame(bm_id))
        if reply.msg_type != RESPONSE_BLOB:
            raise ServerUnavailable(f"unexpected reply type {reply.msg_type}")
        return reply.payload

    def fetch(self, bm_id: int) -> BlockMap:
        return decode_bmap(self.fetch_bytes(bm_id))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalLibraryClient:
    """In-process stand-in for :class:`MapClient` over a loaded library."""

    def __init__(self, library: MapLibrary):
        self.library = library

    def query(self, position) -> tuple[int, np.ndarray, float]:
        bm_id, d = nearest_block(self.library, position)
        return bm_id, self.library.get(bm_id).centroid.copy(), d

    def fetch(self, bm_id: int) -> BlockMap:
        return self.library.get(bm_id)

    def close(self) -> None:
        pass
