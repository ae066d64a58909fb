"""Bird's-eye-view rasterization and exact pixel/world transforms.

Row 0 is the far edge of the grid (largest x) and column 0 the leftmost
edge (largest y), so ``x = x_max - (r + 0.5) * delta`` at cell centers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, MalformedFileError
from .lidar_io import PointCloud

HEIGHT, OCCUPANCY, INTENSITY = 0, 1, 2


@dataclass(frozen=True)
class BevGrid:
    x_max: float = 51.2
    y_half: float = 12.8
    z_min: float = -2.73
    z_max: float = 1.27
    delta: float = 0.1

    def __post_init__(self):
        if not self.z_max > self.z_min:
            raise ContractError(f"z_max ({self.z_max}) must exceed z_min ({self.z_min})")
        for name, extent in (("x_max", self.x_max), ("2*y_half", 2 * self.y_half)):
            cells = extent / self.delta
            if abs(cells - round(cells)) > 1e-9 or round(cells) < 1:
                raise ContractError(f"{name}={extent} is not a whole number of {self.delta} m cells")

    @property
    def rows(self) -> int:
        return int(round(self.x_max / self.delta))

    @property
    def cols(self) -> int:
        return int(round(2 * self.y_half / self.delta))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @classmethod
    def desk(cls) -> "BevGrid":
        """64x32 grid at 0.3 m cells used for desk-scale training."""
        return cls(x_max=19.2, y_half=4.8, delta=0.3)


@dataclass
class BevImage:
    grid: BevGrid
    planes: np.ndarray  # (3, rows, cols) float32: height, occupancy, intensity

    @property
    def height_plane(self) -> np.ndarray:
        return self.planes[HEIGHT]

    @property
    def occupancy_plane(self) -> np.ndarray:
        return self.planes[OCCUPANCY]

    @property
    def intensity_plane(self) -> np.ndarray:
        return self.planes[INTENSITY]


def world_to_pixel(x, y, grid: BevGrid):
    """Cell indices containing world point ``(x, y)``, or ``None`` outside the grid.

    Accepts arrays as well; then returns ``(r, c, inside)`` with integer
    arrays and a boolean mask.
    """
    r = np.floor((grid.x_max - np.asarray(x, dtype=np.float64)) / grid.delta).astype(np.int64)
    c = np.floor((grid.y_half - np.asarray(y, dtype=np.float64)) / grid.delta).astype(np.int64)
    inside = (r >= 0) & (r < grid.rows) & (c >= 0) & (c < grid.cols)
    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return (int(r), int(c)) if inside else None
    return r, c, inside


def pixel_to_world(r, c, grid: BevGrid):
    """World coordinates of the center of cell ``(r, c)``."""
    r_arr, c_arr = np.asarray(r), np.asarray(c)
    if np.any((r_arr < 0) | (r_arr >= grid.rows) | (c_arr < 0) | (c_arr >= grid.cols)):
        raise ContractError(f"pixel ({r}, {c}) outside {grid.rows}x{grid.cols} grid")
    x = grid.x_max - (r_arr + 0.5) * grid.delta
    y = grid.y_half - (c_arr + 0.5) * grid.delta
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def normalize_height(z, grid: BevGrid):
    return (np.clip(z, grid.z_min, grid.z_max) - grid.z_min) / (grid.z_max - grid.z_min)


def height_to_z(h, grid: BevGrid):
    return np.asarray(h, dtype=np.float64) * (grid.z_max - grid.z_min) + grid.z_min


def encode_bev(cloud: PointCloud, grid: BevGrid) -> BevImage:
    """Rasterize ``cloud`` into height / occupancy / intensity planes.

    Height is the clipped maximum z per cell, offset and scaled to [0, 1].
    Intensity comes from the highest point in the cell; among points at the
    same (clipped) height the largest intensity wins, which keeps the result
    independent of point order.
    """
    planes = np.zeros((3, grid.rows, grid.cols), dtype=np.float32)
    if len(cloud) == 0:
        return BevImage(grid, planes)
    pts = cloud.points
    r, c, inside = world_to_pixel(pts[:, 0], pts[:, 1], grid)
    idx = (r * grid.cols + c)[inside]
    z = np.clip(pts[inside, 2].astype(np.float64), grid.z_min, grid.z_max)
    inten = np.clip(pts[inside, 3].astype(np.float64), 0.0, 1.0)

    ncell = grid.rows * grid.cols
    zmax = np.full(ncell, -np.inf)
    np.maximum.at(zmax, idx, z)
    top = z == zmax[idx]
    imax = np.full(ncell, -np.inf)
    np.maximum.at(imax, idx[top], inten[top])

    occ = np.isfinite(zmax)
    height = np.zeros(ncell)
    height[occ] = normalize_height(zmax[occ], grid)
    planes[HEIGHT] = height.reshape(grid.shape)
    planes[OCCUPANCY] = occ.reshape(grid.shape)
    planes[INTENSITY] = np.where(occ, imax, 0.0).reshape(grid.shape)
    return BevImage(grid, planes)


# --------------------------------------------------------------------------
# raw plane files
# --------------------------------------------------------------------------


def write_planes(path: str | os.PathLike, magic: str, planes: np.ndarray, dtypes=None) -> None:
    """Write ``<magic> <rows> <cols> <channels>\\n`` then channel-major little-endian data.

    ``dtypes`` optionally gives a per-channel numpy dtype (default f32).
    """
    c, rows, cols = planes.shape
    dtypes = dtypes or ["<f4"] * c
    with open(path, "wb") as fh:
        fh.write(f"{magic} {rows} {cols} {c}\n".encode("ascii"))
        for k in range(c):
            fh.write(np.ascontiguousarray(planes[k], dtype=dtypes[k]).tobytes())


def read_planes(path: str | os.PathLike, magic: str, dtypes=None) -> np.ndarray:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    parts = head.decode("ascii", errors="replace").split()
    if not sep or len(parts) != 4 or parts[0] != magic:
        raise MalformedFileError(f"{path}: expected '{magic} <rows> <cols> <channels>' header")
    try:
        rows, cols, c = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise MalformedFileError(f"{path}: bad header {head!r}") from exc
    dtypes = dtypes or ["<f4"] * c
    if len(dtypes) != c:
        raise MalformedFileError(f"{path}: expected {len(dtypes)} channels, header says {c}")
    need = sum(np.dtype(d).itemsize for d in dtypes) * rows * cols
    if len(body) != need:
        raise MalformedFileError(f"{path}: payload is {len(body)} bytes, expected {need}")
    out, off = [], 0
    for d in dtypes:
        n = np.dtype(d).itemsize * rows * cols
        out.append(np.frombuffer(body[off : off + n], dtype=d).reshape(rows, cols))
        off += n
    return out


def save_bev(bev: BevImage, path: str | os.PathLike) -> None:
    write_planes(path, "BEV1", bev.planes)


def load_bev(path: str | os.PathLike, grid: BevGrid | None = None) -> BevImage:
    planes = np.stack(read_planes(path, "BEV1", ["<f4"] * 3)).astype(np.float32)
    grid = grid or BevGrid()
    if planes.shape[1:] != grid.shape:
        raise ContractError(f"{path}: BEV is {planes.shape[1:]}, grid expects {grid.shape}")
    return BevImage(grid, planes)


def save_png_preview(bev: BevImage, path: str | os.PathLike) -> None:
    """8-bit grayscale PNG of the height plane."""
    from PIL import Image

    img = np.round(np.clip(bev.height_plane, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(img).save(path)
