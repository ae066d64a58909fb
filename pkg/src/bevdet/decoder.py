"""Turn head outputs into oriented detections in the LiDAR frame."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bev import BevGrid, BevImage, height_to_z, pixel_to_world
from .errors import ContractError
from .lidar_io import Calibration, ObjectLabel, label_to_kitti_line
from .nn.layers import channel_softmax
from .targets import DEFAULT_CLASS_TABLE, NUM_ROT_CLASSES, TargetMaps, bin_to_angle


@dataclass
class Detection:
    class_id: int
    score: float
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # (H, W, L)
    yaw_deg: float  # [0, 180)


@dataclass
class DecodeStats:
    background_rotation: int = 0


# offsets whose pixel precedes the center in (row, col) order
_EARLIER = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
_LATER = [(0, 1), (1, -1), (1, 0), (1, 1)]


def window_nms(class_probs: np.ndarray, threshold: float = 0.5, min_distance: float | None = None):
    """Keypoints that are the strict maximum of their 3x3 window.

    ``class_probs`` is ``(C, H, W)`` with channel 0 the background. The
    foreground score of a pixel is its best non-background probability.
    Equal scores are resolved in favour of the lexicographically smaller
    ``(r, c)``. With ``min_distance`` (pixels), a second greedy pass drops
    keypoints closer than that to a higher-scoring one.

    Returns ``[(r, c, class_id, score), ...]`` sorted by descending score.
    """
    if class_probs.ndim != 3 or class_probs.shape[0] < 2:
        raise ContractError(f"class_probs must be (C>=2, H, W), got {class_probs.shape}")
    fg = class_probs[1:]
    cls = fg.argmax(axis=0) + 1
    score = fg.max(axis=0).astype(np.float64)
    h, w = score.shape
    padded = np.pad(score, 1, constant_values=-np.inf)
    keep = score >= threshold
    for dr, dc in _EARLIER:
        keep &= score > padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    for dr, dc in _LATER:
        keep &= score >= padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    rs, cs = np.nonzero(keep)
    order = np.lexsort((cs, rs, -score[rs, cs]))
    peaks = [(int(rs[i]), int(cs[i]), int(cls[rs[i], cs[i]]), float(score[rs[i], cs[i]])) for i in order]
    if min_distance:
        kept = []
        for p in peaks:
            if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= min_distance for q in kept):
                kept.append(p)
        peaks = kept
    return peaks


def decode(
    heads,
    grid: BevGrid,
    threshold: float = 0.5,
    bev: BevImage | None = None,
    min_distance: float | None = None,
    stats: DecodeStats | None = None,
) -> list[Detection]:
    """Decode one frame's heads ``(class_logits, box, rot_logits)``, each ``(K, rows, cols)``.

    A leading batch axis of size 1 is accepted.
    """
    cls_logits, box, rot_logits = (np.asarray(a) for a in heads)
    if cls_logits.ndim == 4:
        cls_logits, box, rot_logits = cls_logits[0], box[0], rot_logits[0]
    for name, arr in (("class", cls_logits), ("box", box), ("rotation", rot_logits)):
        if arr.shape[1:] != grid.shape:
            raise ContractError(f"{name} head {arr.shape} does not match grid {grid.shape}")
    if rot_logits.shape[0] != NUM_ROT_CLASSES or box.shape[0] != 3:
        raise ContractError(f"expected 3 box and {NUM_ROT_CLASSES} rotation channels")
    probs = channel_softmax(cls_logits[None].astype(np.float64))[0]
    dets = []
    for r, c, cls, score in window_nms(probs, threshold, min_distance):
        x, y = pixel_to_world(r, c, grid)
        z = float(height_to_z(bev.height_plane[r, c], grid)) if bev is not None else 0.0
        dims = tuple(float(v) for v in np.exp(box[:, r, c].astype(np.float64)))
        rot = rot_logits[:, r, c]
        best = int(rot.argmax())
        if best == 0:
            if stats is not None:
                stats.background_rotation += 1
            best = int(rot[1:].argmax()) + 1
        dets.append(Detection(cls, score, (x, y, z), dims, bin_to_angle(best)))
    return dets


def targets_to_heads(targets: TargetMaps, num_classes: int = 2, scale: float = 10.0):
    """Render target maps as head outputs that decode back to the labels.

    A positive pixel's class logit grows with the number of pixels in its
    3x3 window carrying the same target (class, rotation bin and box), so
    each stamp peaks at its own center even when stamps touch.
    """
    cmap = targets.class_map
    h, w = cmap.shape
    key = np.concatenate([cmap[None], targets.rotbin_map[None], targets.box_map]).astype(np.float64)
    padded = np.pad(key, ((0, 0), (1, 1), (1, 1)), constant_values=np.nan)
    support = np.zeros((h, w))
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            support += (padded[:, 1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w] == key).all(axis=0)
    cls_logits = np.zeros((num_classes, h, w), dtype=np.float64)
    for k in range(1, num_classes):
        cls_logits[k] = np.where(cmap == k, scale * support / 9.0, -scale)
    rot = np.full((NUM_ROT_CLASSES, h, w), -scale)
    np.put_along_axis(rot, targets.rotbin_map[None], scale, axis=0)
    return cls_logits, targets.box_map.astype(np.float64), rot


def detection_to_label(det: Detection, class_names: Mapping[int, str] | None = None) -> ObjectLabel:
    names = class_names or {v: k for k, v in DEFAULT_CLASS_TABLE.items()}
    yaw = math.radians(det.yaw_deg)
    return ObjectLabel(
        class_name=names.get(det.class_id, str(det.class_id)),
        center=det.center,
        dims=det.dims,
        yaw=yaw,
        truncation=0.0,
        occlusion=0,
        bbox_height_px=None,
        score=det.score,
    )


def detections_to_kitti(dets: Sequence[Detection], calib: Calibration, class_names=None) -> list[str]:
    """KITTI result lines; unestimated 2D box entries are written as -1."""
    return [label_to_kitti_line(detection_to_label(d, class_names), calib, score=d.score) for d in dets]


CSV_FIELDS = ["frame", "class", "score", "x", "y", "z", "H", "W", "L", "yaw_deg"]


def detections_to_csv(frames: Mapping[str, Sequence[Detection]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for frame, dets in frames.items():
        for d in dets:
            writer.writerow(
                [frame, d.class_id, f"{d.score:.6f}", *(f"{v:.6f}" for v in d.center), *(f"{v:.6f}" for v in d.dims), f"{d.yaw_deg:.3f}"]
            )
    return buf.getvalue()
