"""Per-pixel training targets: keypoint classes, log-dimensions and rotation bins."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bev import BevGrid, pixel_to_world, read_planes, world_to_pixel, write_planes
from .errors import ContractError
from .lidar_io import ObjectLabel

NUM_BINS = 20
BIN_WIDTH_DEG = 180.0 / NUM_BINS
NUM_ROT_CLASSES = NUM_BINS + 1  # bin 0 is background

DEFAULT_CLASS_TABLE: dict[str, int] = {"Car": 1}


def map_angle(phi):
    """Fold an orientation in (-180, 180] degrees onto [0, 180)."""
    phi = np.asarray(phi, dtype=np.float64)
    if np.any((phi <= -180.0) | (phi > 180.0)):
        raise ContractError(f"angle outside (-180, 180]: {phi}")
    out = np.where(phi >= 0.0, phi, 180.0 + phi)
    out = np.where(out >= 180.0, out - 180.0, out)
    return float(out) if out.ndim == 0 else out


def angle_to_bin(phi_new):
    """Object rotation bin (1..20) of an angle in [0, 180) degrees."""
    b = 1 + np.floor(np.asarray(phi_new, dtype=np.float64) / BIN_WIDTH_DEG).astype(np.int64)
    b = np.clip(b, 1, NUM_BINS)
    return int(b) if b.ndim == 0 else b


def bin_to_angle(b):
    """Center angle in degrees of object bin ``b``."""
    arr = np.asarray(b)
    if np.any((arr < 1) | (arr > NUM_BINS)):
        raise ContractError(f"rotation bin {b} is not an object bin (1..{NUM_BINS})")
    out = (arr - 1) * BIN_WIDTH_DEG + BIN_WIDTH_DEG / 2
    return float(out) if out.ndim == 0 else out


def yaw_to_bin(yaw_rad: float) -> int:
    deg = math.degrees(yaw_rad)
    if deg <= -180.0:
        deg += 360.0
    return angle_to_bin(map_angle(deg))


@dataclass
class TargetMaps:
    class_map: np.ndarray  # (rows, cols) int64, 0 = background
    box_map: np.ndarray  # (3, rows, cols) float32: log H, log W, log L
    rotbin_map: np.ndarray  # (rows, cols) int64 in [0, 21)
    skipped: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def positive(self) -> np.ndarray:
        return self.class_map > 0

    @classmethod
    def empty(cls, grid: BevGrid) -> "TargetMaps":
        return cls(
            np.zeros(grid.shape, dtype=np.int64),
            np.zeros((3, *grid.shape), dtype=np.float32),
            np.zeros(grid.shape, dtype=np.int64),
        )


def make_targets(
    labels: Sequence[ObjectLabel],
    grid: BevGrid,
    class_table: Mapping[str, int] = DEFAULT_CLASS_TABLE,
) -> TargetMaps:
    """Stamp each in-grid label onto its center pixel and 8-neighborhood.

    Where stamps overlap, the pixel goes to the label whose center is
    nearest to the pixel center (earlier label on exact ties). Labels with
    an unknown class or non-positive dimensions are listed in ``rejected``;
    labels whose center is outside the grid are counted in ``skipped``.
    """
    maps = TargetMaps.empty(grid)
    best = np.full(grid.shape, np.inf)
    for i, lab in enumerate(labels):
        if lab.class_name not in class_table:
            maps.rejected.append((i, f"class {lab.class_name!r} not in class table"))
            continue
        if min(lab.dims) <= 0:
            maps.rejected.append((i, f"non-positive dimensions {lab.dims}"))
            continue
        cell = world_to_pixel(lab.center[0], lab.center[1], grid)
        if cell is None:
            maps.skipped += 1
            continue
        r, c = cell
        rot = yaw_to_bin(lab.yaw)
        logs = np.log(np.asarray(lab.dims, dtype=np.float64)).astype(np.float32)
        for rr in range(max(r - 1, 0), min(r + 2, grid.rows)):
            for cc in range(max(c - 1, 0), min(c + 2, grid.cols)):
                px, py = pixel_to_world(rr, cc, grid)
                d = math.hypot(px - lab.center[0], py - lab.center[1])
                if d < best[rr, cc]:
                    best[rr, cc] = d
                    maps.class_map[rr, cc] = class_table[lab.class_name]
                    maps.rotbin_map[rr, cc] = rot
                    maps.box_map[:, rr, cc] = logs
    return maps


def save_targets(maps: TargetMaps, path: str | os.PathLike) -> None:
    """``TGT1`` file: class and rotation-bin planes as int32, then three f32 box planes."""
    planes = np.concatenate(
        [maps.class_map[None].astype(np.float64), maps.rotbin_map[None].astype(np.float64), maps.box_map]
    )
    write_planes(path, "TGT1", planes, ["<i4", "<i4", "<f4", "<f4", "<f4"])


def load_targets(path: str | os.PathLike) -> TargetMaps:
    cls_map, rot, *box = read_planes(path, "TGT1", ["<i4", "<i4", "<f4", "<f4", "<f4"])
    return TargetMaps(cls_map.astype(np.int64), np.stack(box).astype(np.float32), rot.astype(np.int64))
