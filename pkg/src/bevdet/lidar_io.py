"""KITTI point cloud / label / calibration I/O, synthetic scenes and augmentation.

Frames used here:

* LiDAR frame: x forward, y left, z up (meters). Yaw is measured
  counterclockwise from +x.
* Camera (rectified) frame: KITTI ``label_2`` locations, bottom-center of
  the box, ``rotation_y`` about the camera y axis.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, MalformedFileError, PlacementError

# approximate KITTI camera focal length, used to synthesize 2D box heights
KITTI_FOCAL_PX = 721.5377


def wrap_angle(a):
    """Wrap radians into (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), 2.0 * math.pi)


def _wrap_scalar(a: float) -> float:
    return float(wrap_angle(a))


@dataclass(frozen=True)
class PointCloud:
    """Unordered LiDAR returns as an ``(N, 4)`` array ``x, y, z, intensity``.

    Files are float32; float64 input is kept as-is so exact geometric
    round trips stay exact.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.dtype != np.float64:
            pts = pts.astype(np.float32)
        if pts.ndim != 2 or pts.shape[1] != 4:
            if pts.size == 0:
                pts = pts.reshape(0, 4)
            else:
                raise ContractError(f"point array must be (N, 4), got {pts.shape}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4), dtype=np.float32))

    def normalized(self) -> "PointCloud":
        """Copy with intensity clamped to [0, 1]."""
        pts = self.points.copy()
        np.clip(pts[:, 3], 0.0, 1.0, out=pts[:, 3])
        return PointCloud(pts)


@dataclass
class ObjectLabel:
    class_name: str
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # (H, W, L)
    yaw: float
    truncation: float | None = 0.0
    occlusion: int | None = 0
    bbox_height_px: float | None = None
    score: float | None = None

    @property
    def height(self) -> float:
        return self.dims[0]

    @property
    def width(self) -> float:
        return self.dims[1]

    @property
    def length(self) -> float:
        return self.dims[2]


@dataclass(frozen=True)
class Calibration:
    velo_to_cam: np.ndarray  # (3, 4) [R | t]
    rect: np.ndarray  # (3, 3)

    def __post_init__(self):
        v2c = np.asarray(self.velo_to_cam, dtype=np.float64).reshape(3, 4)
        rect = np.asarray(self.rect, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "velo_to_cam", v2c)
        object.__setattr__(self, "rect", rect)

    def check_orthonormal(self, tol: float = 1e-6) -> None:
        for name, rot in (("Tr_velo_to_cam", self.velo_to_cam[:, :3]), ("R0_rect", self.rect)):
            err = np.abs(rot @ rot.T - np.eye(3)).max()
            if err > tol:
                raise MalformedFileError(f"{name} rotation not orthonormal (max error {err:.2e})")

    @classmethod
    def identity(cls) -> "Calibration":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]), np.eye(3))

    @classmethod
    def kitti_like(cls) -> "Calibration":
        """Axis-swap calibration with a small lever arm, close to KITTI's rig."""
        rot = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        t = np.array([[-0.004], [-0.076], [-0.27]])
        return cls(np.hstack([rot, t]), np.eye(3))

    def lidar_to_cam(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        velo = pts @ self.velo_to_cam[:, :3].T + self.velo_to_cam[:, 3]
        return velo @ self.rect.T

    def cam_to_lidar(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        unrect = np.linalg.solve(self.rect, pts.T).T
        return np.linalg.solve(self.velo_to_cam[:, :3], (unrect - self.velo_to_cam[:, 3]).T).T


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def read_point_cloud(path: str | os.PathLike) -> PointCloud:
    """Read a KITTI velodyne ``.bin`` file (little-endian float32 quadruplets)."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
    if bad.size:
        raise MalformedFileError(f"{path}: non-finite value in point {int(bad[0])}")
    return PointCloud(pts)


def write_point_cloud(cloud: PointCloud, path: str | os.PathLike) -> None:
    Path(path).write_bytes(cloud.points.astype("<f4").tobytes())


def read_calibration(path: str | os.PathLike) -> Calibration:
    """Parse ``Tr_velo_to_cam`` and ``R0_rect`` from a KITTI ``calib/*.txt`` file."""
    mats: dict[str, np.ndarray] = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            mats[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise MalformedFileError(f"{path}: bad matrix line {key!r}") from exc
    try:
        v2c = mats["Tr_velo_to_cam"].reshape(3, 4)
        rect = mats["R0_rect"].reshape(3, 3)
    except KeyError as exc:
        raise MalformedFileError(f"{path}: missing {exc.args[0]}") from exc
    except ValueError as exc:
        raise MalformedFileError(f"{path}: wrong matrix size") from exc
    return Calibration(v2c, rect)


def write_calibration(calib: Calibration, path: str | os.PathLike) -> None:
    def fmt(m):
        return " ".join(f"{v:.12e}" for v in np.asarray(m).ravel())

    Path(path).write_text(
        f"R0_rect: {fmt(calib.rect)}\nTr_velo_to_cam: {fmt(calib.velo_to_cam)}\n"
    )


def cam_yaw_to_lidar(rotation_y: float) -> float:
    return _wrap_scalar(-rotation_y - math.pi / 2)


def lidar_yaw_to_cam(yaw: float) -> float:
    return _wrap_scalar(-yaw - math.pi / 2)


def parse_label_lines(lines: Iterable[str], calib: Calibration, source: str = "<labels>") -> list[ObjectLabel]:
    labels = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (15, 16):
            raise MalformedFileError(f"{source}:{lineno}: expected 15 fields, got {len(parts)}")
        if parts[0] == "DontCare":
            continue
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise MalformedFileError(f"{source}:{lineno}: {exc}") from exc
        trunc, occ, _alpha, _x1, y1, _x2, y2, h, w, l, cx, cy, cz, ry = vals[:14]
        center = calib.cam_to_lidar([cx, cy, cz])[0]
        labels.append(
            ObjectLabel(
                class_name=parts[0],
                center=(float(center[0]), float(center[1]), float(center[2])),
                dims=(h, w, l),
                yaw=cam_yaw_to_lidar(ry),
                truncation=trunc,
                occlusion=int(occ),
                bbox_height_px=y2 - y1,
                score=vals[14] if len(vals) == 15 else None,
            )
        )
    return labels


def parse_labels(path: str | os.PathLike, calib: Calibration) -> list[ObjectLabel]:
    """Read a KITTI ``label_2`` file and convert every object into the LiDAR frame.

    ``DontCare`` rows are dropped. A trailing 16th column is read as a
    detection score, so result files parse too.
    """
    return parse_label_lines(Path(path).read_text().splitlines(), calib, source=str(path))


def label_to_kitti_line(label: ObjectLabel, calib: Calibration, score: float | None = None) -> str:
    loc = calib.lidar_to_cam(label.center)[0]
    ry = lidar_yaw_to_cam(label.yaw)
    trunc = label.truncation if label.truncation is not None else 0.0
    occ = label.occlusion if label.occlusion is not None else 0
    if label.bbox_height_px is not None:
        y1, y2 = 0.0, label.bbox_height_px
        box = f"0.00 {y1:.2f} 0.00 {y2:.2f}"
    else:
        box = "-1 -1 -1 -1"
    h, w, l = label.dims
    line = (
        f"{label.class_name} {trunc:.2f} {occ:d} -10 {box} "
        f"{h:.6f} {w:.6f} {l:.6f} {loc[0]:.6f} {loc[1]:.6f} {loc[2]:.6f} {ry:.6f}"
    )
    if score is not None:
        line += f" {score:.2f}"
    return line


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------


@dataclass
class SceneSpec:
    """Parameters of a synthetic scene. Angles in radians, lengths in meters."""

    seed: int = 0
    num_objects: int = 1
    class_name: str = "Car"
    x_range: tuple[float, float] = (0.0, 51.2)
    y_range: tuple[float, float] = (-12.8, 12.8)
    h_range: tuple[float, float] = (1.4, 1.7)
    w_range: tuple[float, float] = (1.5, 1.8)
    l_range: tuple[float, float] = (3.5, 4.5)
    yaw_range: tuple[float, float] = (-math.pi, math.pi)
    clutter_density: float = 0.02  # points per square meter of placement area
    ground_density: float = 0.5
    surface_density: float = 4000.0  # object points = surface_density / range
    min_object_points: int = 10
    sensor_height: float = 1.73
    border: float = 0.5
    max_retries: int = 200

    @classmethod
    def from_text(cls, text: str, **overrides) -> "SceneSpec":
        """Parse ``key = value`` lines; tuples are comma separated."""
        known = {f.name: f for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise ConfigError(f"scene spec line {lineno}: expected key = value")
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in known:
                raise ConfigError(f"scene spec line {lineno}: unknown key {key!r}")
            values[key] = _coerce(val, getattr(cls(), key))
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | os.PathLike, **overrides) -> "SceneSpec":
        return cls.from_text(Path(path).read_text(), **overrides)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


def _coerce(text: str, default):
    try:
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(","))
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r}: {exc}") from exc
    return text


def box_corners_bev(center, width: float, length: float, yaw: float) -> np.ndarray:
    """Counterclockwise footprint corners, length along the yaw direction."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2, width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.asarray(center[:2], dtype=np.float64)


def footprints_separated(a: np.ndarray, b: np.ndarray, margin: float = 0.0) -> bool:
    """Separating-axis test: True if convex footprints ``a`` and ``b`` are at least ``margin`` apart
    along some edge normal."""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.column_stack([-edges[:, 1], edges[:, 0]])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        for n in normals:
            pa, pb = a @ n, b @ n
            if pa.min() - pb.max() >= margin or pb.min() - pa.max() >= margin:
                return True
    return False


def _sample_box_surface(rng: np.random.Generator, n: int, h: float, w: float, l: float) -> np.ndarray:
    """Points on the top and four side faces of an axis-aligned box (local frame, z from 0)."""
    faces = np.array([l * w, l * h, l * h, w * h, w * h])  # top, +y, -y, +x, -x
    which = rng.choice(5, size=n, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(0.0, 1.0, size=n)
    pts = np.empty((n, 3))
    for k, (px, py, pz) in enumerate(
        [
            (u * l, (v - 0.5) * w, np.full(n, h)),
            (u * l, np.full(n, w / 2), v * h),
            (u * l, np.full(n, -w / 2), v * h),
            (np.full(n, l / 2), u * w, v * h),
            (np.full(n, -l / 2), u * w, v * h),
        ]
    ):
        m = which == k
        pts[m, 0], pts[m, 1], pts[m, 2] = px[m], py[m], pz[m]
    return pts


def synth_scene(spec: SceneSpec) -> tuple[PointCloud, list[ObjectLabel]]:
    """Generate a labelled synthetic scene; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    x0, x1 = spec.x_range
    y0, y1 = spec.y_range
    ground_z = -spec.sensor_height

    labels: list[ObjectLabel] = []
    footprints: list[np.ndarray] = []
    tries = 0
    while len(labels) < spec.num_objects:
        if tries >= spec.max_retries:
            raise PlacementError(
                f"placed {len(labels)} of {spec.num_objects} objects after {tries} attempts"
            )
        tries += 1
        h = float(rng.uniform(*spec.h_range))
        w = float(rng.uniform(*spec.w_range))
        l = float(rng.uniform(*spec.l_range))
        yaw = float(rng.uniform(*spec.yaw_range))
        cx = float(rng.uniform(x0, x1))
        cy = float(rng.uniform(y0, y1))
        corners = box_corners_bev((cx, cy), w, l, yaw)
        b = spec.border
        if (
            corners[:, 0].min() < x0 + b
            or corners[:, 0].max() > x1 - b
            or corners[:, 1].min() < y0 + b
            or corners[:, 1].max() > y1 - b
        ):
            continue
        if not all(footprints_separated(corners, other, b) for other in footprints):
            continue
        footprints.append(corners)
        dist = max(math.hypot(cx, cy), 1.0)
        labels.append(
            ObjectLabel(
                class_name=spec.class_name,
                center=(cx, cy, ground_z),
                dims=(h, w, l),
                yaw=_wrap_scalar(yaw),
                truncation=0.0,
                occlusion=0,
                bbox_height_px=KITTI_FOCAL_PX * h / dist,
            )
        )

    chunks = []
    for lab in labels:
        h, w, l = lab.dims
        dist = max(math.hypot(lab.center[0], lab.center[1]), 1.0)
        n = max(spec.min_object_points, int(round(spec.surface_density / dist)))
        local = _sample_box_surface(rng, n, h, w, l)
        c, s = math.cos(lab.yaw), math.sin(lab.yaw)
        world = np.empty((n, 4))
        world[:, 0] = c * local[:, 0] - s * local[:, 1] + lab.center[0]
        world[:, 1] = s * local[:, 0] + c * local[:, 1] + lab.center[1]
        world[:, 2] = local[:, 2] + ground_z
        world[:, 3] = rng.uniform(0.2, 0.9, size=n)
        chunks.append(world)

    area = (x1 - x0) * (y1 - y0)
    n_ground = int(round(spec.ground_density * area))
    ground = np.column_stack(
        [
            rng.uniform(x0, x1, n_ground),
            rng.uniform(y0, y1, n_ground),
            ground_z + rng.normal(0.0, 0.02, n_ground),
            rng.uniform(0.0, 0.3, n_ground),
        ]
    )
    n_clutter = int(round(spec.clutter_density * area))
    clutter = np.column_stack(
        [
            rng.uniform(x0, x1, n_clutter),
            rng.uniform(y0, y1, n_clutter),
            rng.uniform(ground_z, ground_z + 2.5, n_clutter),
            rng.uniform(0.0, 1.0, n_clutter),
        ]
    )
    chunks += [ground, clutter]
    return PointCloud(np.vstack(chunks).astype(np.float32)), labels


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

MAX_ROTATION_DEG = 5.0


def augment(
    cloud: PointCloud,
    labels: Sequence[ObjectLabel],
    mode: str,
    rng: np.random.Generator | None = None,
    theta: float | None = None,
) -> tuple[PointCloud, list[ObjectLabel]]:
    """Apply ``"hflip"`` or ``"global_rotation"`` to a scene.

    For rotation, ``theta`` (radians) is drawn uniformly from +-5 degrees
    with ``rng`` unless given explicitly.
    """
    pts = cloud.points.astype(np.float64)
    if mode == "hflip":
        pts[:, 1] = -pts[:, 1]
        new = [
            replace(lab, center=(lab.center[0], -lab.center[1], lab.center[2]), yaw=_wrap_scalar(-lab.yaw))
            for lab in labels
        ]
    elif mode == "global_rotation":
        if theta is None:
            if rng is None:
                raise ContractError("global_rotation needs rng or explicit theta")
            lim = math.radians(MAX_ROTATION_DEG)
            theta = float(rng.uniform(-lim, lim))
        c, s = math.cos(theta), math.sin(theta)
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0] = c * x - s * y
        pts[:, 1] = s * x + c * y
        new = []
        for lab in labels:
            cx, cy, cz = lab.center
            new.append(
                replace(lab, center=(c * cx - s * cy, s * cx + c * cy, cz), yaw=_wrap_scalar(lab.yaw + theta))
            )
    else:
        raise ContractError(f"unknown augmentation mode {mode!r}")
    return PointCloud(pts.astype(cloud.points.dtype)), new
