"""Flat key=value configuration shared by the simulator, pipeline and CLI.

Every tuning default lives here as a field; a config file overrides fields by
name and CLI flags override the file. Vectors are comma-separated triples.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .liegroups import Pose3, so3_exp
from .octree import OctreeParams
from .state import NoiseParams


@dataclass(frozen=True)
class Config:
    seed: int = 0
    imu_rate: float = 200.0
    lidar_rate: float = 10.0
    gravity_radius: float = 9.81

    # IMU noise densities (continuous time) and simulated constant biases
    gyro_noise_density: float = 0.005
    accel_noise_density: float = 0.02
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4
    sim_gyro_bias: tuple = (0.002, -0.001, 0.0015)
    sim_accel_bias: tuple = (0.02, -0.015, 0.01)

    # LiDAR sensor model
    lidar_range_noise: float = 0.02
    lidar_channels: int = 12
    lidar_azimuth_steps: int = 180
    lidar_fov_vertical_deg: float = 30.0
    lidar_max_range: float = 80.0

    # extrinsics (IMU -> LiDAR), axis-angle rotation and translation
    extrinsic_rotvec: tuple = (0.0, 0.0, 0.0)
    extrinsic_translation: tuple = (0.08, 0.0, 0.05)

    # registration / update
    voxel_leaf: float = 0.4
    knn_k: int = 5
    plane_tolerance: float = 0.1
    max_neighbor_distance: float = 5.0
    sigma_lidar: float = 0.05
    eps_update: float = 1e-4
    max_update_iterations: int = 5
    propagation: str = "sgal3"
    update_enabled: bool = True
    insert_on_degenerate: bool = True
    max_imu_gap: float = 0.05

    # map
    bucket_size: int = 32
    min_extent: float = 0.2
    initial_half_extent: float = 512.0

    # static initialization
    init_duration: float = 1.0
    init_motion_gate: float = 1.0
    extrinsic_init_variance: float = 1e-6

    def noise_params(self) -> NoiseParams:
        return NoiseParams(
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_walk,
            self.accel_bias_walk,
        )

    def octree_params(self) -> OctreeParams:
        return OctreeParams(self.initial_half_extent, self.bucket_size, self.min_extent)

    def extrinsic(self) -> Pose3:
        return Pose3(so3_exp(np.array(self.extrinsic_rotvec)), np.array(self.extrinsic_translation))


_VEC_FIELDS = {"sim_gyro_bias", "sim_accel_bias", "extrinsic_rotvec", "extrinsic_translation"}


def _parse_value(name: str, kind, raw: str):
    if name in _VEC_FIELDS:
        parts = [float(x) for x in raw.split(",")]
        if len(parts) != 3:
            raise ValueError(f"{name} needs 3 comma-separated values, got {raw!r}")
        return tuple(parts)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean {name}={raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw.strip()


def parse_config_file(path) -> dict:
    """Read key=value lines; '#' starts a comment, blank lines ignored."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            out[key.strip()] = raw.strip()
    return out


def make_config(file: str | None = None, overrides: dict | None = None) -> Config:
    """Defaults <- config file <- explicit overrides."""
    kinds = {f.name: f.type for f in fields(Config)}
    defaults = Config()
    values = {}
    if file is not None:
        for key, raw in parse_config_file(file).items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, type(getattr(defaults, key)), raw)
    if overrides:
        for key, val in overrides.items():
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(val, str):
                val = _parse_value(key, type(getattr(defaults, key)), val)
            values[key] = val
    return replace(defaults, **values)


def write_config(cfg: Config, path) -> None:
    with open(path, "w") as f:
        for fld in fields(Config):
            val = getattr(cfg, fld.name)
            if isinstance(val, tuple):
                val = ",".join(repr(float(x)) for x in val)
            f.write(f"{fld.name}={val}\n")
