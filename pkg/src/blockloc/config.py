"""Flat ``key = value`` configuration with typed defaults.

Lines starting with ``#`` are comments. Every key must be one of
:data:`DEFAULTS`; values are parsed with the type of the default.
"""

from __future__ import annotations

import math
import os
from typing import Iterable, Mapping, Optional

from .errors import ConfigError
from .imu_preint import ImuNoise
from .tracker import TrackerConfig

DEFAULTS: dict[str, object] = {
    # block-map generation
    "map.size_S": 30.0,
    "map.leaf": 0.25,
    "map.max_stamp_gap": 0.1,
    "map.strict": False,
    # NDT
    "ndt.voxel_size": 1.0,
    "ndt.outlier_ratio": 0.55,
    "ndt.sigma": 0.1,
    "ndt.scan_leaf": 0.35,
    "ndt.min_match_ratio": 0.2,
    # IMU noise densities
    "imu.gyro_noise": 1.7e-4,
    "imu.accel_noise": 2.0e-3,
    "imu.gyro_walk": 1.0e-5,
    "imu.accel_walk": 1.0e-4,
    "imu.gravity": 9.81,
    "imu.stationary_time": 1.0,
    # sliding window
    "tracker.max_window": 20,
    "tracker.reserve_on_switch": 5,
    "tracker.hysteresis": 3,
    "tracker.prefetch_margin": 0.25,
    "tracker.kf_translation": 0.5,
    "tracker.kf_rotation_deg": 10.0,
    "tracker.kf_interval": 1.0,
    "tracker.max_frame_gap": 0.5,
    "tracker.prior_sigma_pos": 0.1,
    "tracker.prior_sigma_rot_deg": 1.0,
    # global initialization
    "bbs.window": 40.0,
    "bbs.resolution": 0.25,
    "bbs.levels": 6,
    # map server
    "server.timeout_ms": 2000.0,
    # evaluation
    "eval.max_gap": 0.05,
}


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class Config(dict):
    @classmethod
    def load(cls, path: Optional[os.PathLike] = None, overrides: Iterable[str] = ()) -> "Config":
        cfg = cls(DEFAULTS)
        if path is not None:
            try:
                text = open(path).read()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            for n, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ConfigError(f"{path}:{n}: expected key = value")
                cfg.set(key.strip(), value)
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            cfg.set(key.strip(), value)
        return cfg

    def set(self, key: str, raw: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self[key] = _parse(key, raw)

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            max_window=self["tracker.max_window"],
            reserve_on_switch=self["tracker.reserve_on_switch"],
            hysteresis=self["tracker.hysteresis"],
            prefetch_margin=self["tracker.prefetch_margin"],
            kf_translation=self["tracker.kf_translation"],
            kf_rotation_deg=self["tracker.kf_rotation_deg"],
            kf_interval=self["tracker.kf_interval"],
            ndt_voxel=self["ndt.voxel_size"],
            ndt_sigma=self["ndt.sigma"],
            outlier_ratio=self["ndt.outlier_ratio"],
            scan_leaf=self["ndt.scan_leaf"],
            max_frame_gap=self["tracker.max_frame_gap"],
            min_match_ratio=self["ndt.min_match_ratio"],
            prior_sigma_pos=self["tracker.prior_sigma_pos"],
            prior_sigma_rot_deg=self["tracker.prior_sigma_rot_deg"],
            stationary_time=self["imu.stationary_time"],
            imu_noise=ImuNoise(
                self["imu.gyro_noise"], self["imu.accel_noise"], self["imu.gyro_walk"], self["imu.accel_walk"]
            ),
            gravity_magnitude=self["imu.gravity"],
        )


def describe(cfg: Mapping) -> str:
    return "\n".join(f"{k} = {cfg[k]}" for k in DEFAULTS)
