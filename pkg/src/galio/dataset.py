"""Dataset directory layout and TUM trajectory I/O.

A dataset directory holds:
    imu.csv            stamp,wx,wy,wz,ax,ay,az        (SI units)
    scans/index.csv    scan_id,start_stamp
    scans/NNNNNN.csv   x,y,z,offset_s,intensity
    truth.tum          stamp x y z qx qy qz qw        (Hamilton, scalar last)

Floats are written with repr() so files round-trip exactly and identical
inputs produce byte-identical datasets.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .evaluate import TrajectorySamples
from .liegroups import quat_to_rot, rot_to_quat
from .pipeline import LidarScan
from .state import ImuSample


class DatasetError(RuntimeError):
    pass


def write_tum(path, stamps, positions, rotations) -> None:
    with open(path, "w") as f:
        for t, p, R in zip(stamps, positions, rotations):
            q = rot_to_quat(R)
            f.write(f"{t!r} {p[0]!r} {p[1]!r} {p[2]!r} {q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r}\n")


def read_tum(path) -> TrajectorySamples:
    stamps, positions, rotations = [], [], []
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 8:
                    raise DatasetError(f"{path}: expected 8 columns, got {len(parts)}")
                vals = [float(x) for x in parts]
                stamps.append(vals[0])
                positions.append(vals[1:4])
                rotations.append(quat_to_rot(np.array(vals[4:8])))
    except OSError as exc:
        raise DatasetError(str(exc)) from exc
    if not stamps:
        raise DatasetError(f"{path}: empty trajectory")
    return TrajectorySamples(np.array(stamps), np.array(positions), np.array(rotations))


def write_dataset(path, imu: list, scans: list, truth: TrajectorySamples) -> None:
    os.makedirs(path, exist_ok=True)
    scans_dir = os.path.join(path, "scans")
    os.makedirs(scans_dir, exist_ok=True)
    with open(os.path.join(path, "imu.csv"), "w") as f:
        f.write("stamp,wx,wy,wz,ax,ay,az\n")
        for s in imu:
            g, a = s.gyro, s.accel
            f.write(f"{s.stamp!r},{g[0]!r},{g[1]!r},{g[2]!r},{a[0]!r},{a[1]!r},{a[2]!r}\n")
    with open(os.path.join(scans_dir, "index.csv"), "w") as f:
        f.write("scan_id,start_stamp\n")
        for i, sc in enumerate(scans):
            f.write(f"{i},{sc.start_stamp!r}\n")
    for i, sc in enumerate(scans):
        with open(os.path.join(scans_dir, f"{i:06d}.csv"), "w") as f:
            f.write("x,y,z,offset_s,intensity\n")
            inten = sc.intensity if sc.intensity is not None else np.zeros(len(sc))
            for p, o, it in zip(sc.points, sc.offsets, inten):
                f.write(f"{p[0]!r},{p[1]!r},{p[2]!r},{o!r},{it!r}\n")
    write_tum(os.path.join(path, "truth.tum"), truth.stamps, truth.positions, truth.rotations)


def _read_csv(path, expected_header):
    try:
        with open(path) as f:
            header = f.readline().strip()
            if header != expected_header:
                raise DatasetError(f"{path}: unexpected header {header!r}")
            rows = []
            for line in f:
                line = line.strip()
                if line:
                    rows.append([float(x) for x in line.split(",")])
    except OSError as exc:
        raise DatasetError(str(exc)) from exc
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    return np.array(rows) if rows else np.zeros((0, len(expected_header.split(","))))


def read_dataset(path):
    """Returns (imu samples, scans, truth trajectory)."""
    imu_rows = _read_csv(os.path.join(path, "imu.csv"), "stamp,wx,wy,wz,ax,ay,az")
    if imu_rows.shape[0] == 0:
        raise DatasetError("dataset has no IMU samples")
    stamps = imu_rows[:, 0]
    if np.any(np.diff(stamps) <= 0):
        raise DatasetError("IMU stamps are not strictly increasing")
    imu = [ImuSample(float(r[0]), r[1:4].copy(), r[4:7].copy()) for r in imu_rows]

    index = _read_csv(os.path.join(path, "scans", "index.csv"), "scan_id,start_stamp")
    scans = []
    for row in index:
        sid = int(row[0])
        rows = _read_csv(os.path.join(path, "scans", f"{sid:06d}.csv"), "x,y,z,offset_s,intensity")
        if rows.shape[0]:
            scans.append(LidarScan(float(row[1]), rows[:, 0:3], rows[:, 3], rows[:, 4]))
        else:
            scans.append(LidarScan(float(row[1]), np.zeros((0, 3)), np.zeros(0)))
    truth = read_tum(os.path.join(path, "truth.tum"))
    return imu, scans, truth
