"""Small point-cloud helpers shared by the map builder, NDT and the tracker."""

from __future__ import annotations

import numpy as np

# voxel indices are packed into one int64 key, 21 bits per axis
_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


def voxel_indices(points: np.ndarray, size: float) -> np.ndarray:
    return np.floor(np.asarray(points) / size).astype(np.int64)


def pack_keys(idx: np.ndarray) -> np.ndarray:
    idx = idx + _OFFSET
    return (idx[:, 0] << (2 * _BITS)) | (idx[:, 1] << _BITS) | idx[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    out = np.empty((len(keys), 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _BITS)) & _MASK
    out[:, 1] = (keys >> _BITS) & _MASK
    out[:, 2] = keys & _MASK
    return out - _OFFSET


def voxel_downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    """Replace the points of every occupied voxel by their mean.

    Output rows are ordered by voxel key, so the result is deterministic.
    """
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return points.reshape(0, 3)
    keys = pack_keys(voxel_indices(points, leaf))
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv, minlength=len(uniq)).astype(float)
    out = np.empty((len(uniq), 3))
    for k in range(3):
        out[:, k] = np.bincount(inv, weights=points[:, k], minlength=len(uniq)) / counts
    return out
