"""BEV rotated IoU, greedy matching and KITTI-style average precision."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lidar_io import ObjectLabel, box_corners_bev


@dataclass(frozen=True)
class RotatedRect:
    x: float
    y: float
    width: float
    length: float
    yaw_deg: float

    def corners(self) -> np.ndarray:
        return box_corners_bev((self.x, self.y), self.width, self.length, math.radians(self.yaw_deg))

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.length, 0.0)

    @classmethod
    def from_label(cls, lab: ObjectLabel) -> "RotatedRect":
        return cls(lab.center[0], lab.center[1], lab.dims[1], lab.dims[2], math.degrees(lab.yaw))

    @classmethod
    def from_detection(cls, det) -> "RotatedRect":
        return cls(det.center[0], det.center[1], det.dims[1], det.dims[2], det.yaw_deg)


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of ``subject`` left of the directed edge ``a -> b``."""
    out = []
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return out


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def intersection_polygon(a: RotatedRect, b: RotatedRect) -> list:
    """Sutherland-Hodgman clip of ``a`` against the convex rectangle ``b``."""
    poly = [tuple(p) for p in a.corners()]
    cb = b.corners()
    for i in range(4):
        if not poly:
            break
        poly = _clip(poly, cb[i], cb[(i + 1) % 4])
    return poly


def rotated_iou(a: RotatedRect, b: RotatedRect) -> float:
    if a.area <= 0 or b.area <= 0:
        return 0.0
    inter = polygon_area(intersection_polygon(a, b))
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_matrix(dets: Sequence[RotatedRect], gts: Sequence[RotatedRect]) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            out[i, j] = rotated_iou(d, g)
    return out


@dataclass
class MatchResult:
    tp: np.ndarray  # per detection
    gt_matched: np.ndarray  # per ground truth
    matched_gt: np.ndarray  # per detection: gt index or -1

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp


def match(
    det_rects: Sequence[RotatedRect],
    det_classes: Sequence[int],
    gt_rects: Sequence[RotatedRect],
    gt_classes: Sequence[int],
    iou_threshold: float,
    ious: np.ndarray | None = None,
) -> MatchResult:
    """Greedy matching of score-sorted detections to ground truth.

    Each detection takes the highest-IoU unmatched ground truth of its class
    with IoU >= ``iou_threshold``; ties go to the lower ground-truth index.
    """
    nd, ng = len(det_rects), len(gt_rects)
    if ious is None:
        ious = iou_matrix(det_rects, gt_rects)
    tp = np.zeros(nd, dtype=bool)
    taken = np.zeros(ng, dtype=bool)
    assigned = np.full(nd, -1, dtype=np.int64)
    for i in range(nd):
        best, best_iou = -1, -1.0
        for j in range(ng):
            if taken[j] or gt_classes[j] != det_classes[i]:
                continue
            if ious[i, j] >= iou_threshold and ious[i, j] > best_iou:
                best, best_iou = j, ious[i, j]
        if best >= 0:
            tp[i] = True
            taken[best] = True
            assigned[i] = best
    return MatchResult(tp, taken, assigned)


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float
    mode: str = "11"
    warning: str | None = None


RECALL_POINTS = {
    "11": np.linspace(0.0, 1.0, 11),
    "40": np.arange(1, 41) / 40.0,
}


def average_precision(tp_flags, scores=None, num_gt: int = 0, mode: str = "11") -> PrCurve:
    """Interpolated AP from per-detection TP flags pooled over a dataset.

    Flags are sorted by descending ``scores`` when given (stable), else used
    in the order supplied. ``mode`` is ``"11"`` (recall 0, 0.1, ..., 1) or
    ``"40"`` (recall 1/40, ..., 1); precision at each sample is the maximum
    precision at any recall >= the sample.
    """
    if mode not in RECALL_POINTS:
        raise ValueError(f"mode must be '11' or '40', got {mode!r}")
    flags = np.asarray(tp_flags, dtype=bool)
    if scores is not None:
        flags = flags[np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")]
    if num_gt <= 0:
        warnings.warn("average precision with no ground truth is defined as 0", RuntimeWarning, stacklevel=2)
        return PrCurve(np.zeros(0), np.zeros(0), 0.0, mode, warning="no ground truth")
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    samples = []
    for r in RECALL_POINTS[mode]:
        above = precision[recall >= r - 1e-12]
        samples.append(above.max() if above.size else 0.0)
    return PrCurve(recall, precision, float(np.mean(samples)), mode)


# KITTI difficulty table: (min 2D box height px, max occlusion, max truncation)
DIFFICULTY = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


def difficulty_filter(gts: Sequence[ObjectLabel], level: str) -> list[ObjectLabel]:
    min_h, max_occ, max_trunc = DIFFICULTY[level]
    out, missing = [], False
    for g in gts:
        if g.bbox_height_px is None or g.occlusion is None or g.truncation is None:
            missing = True
            out.append(g)
            continue
        if g.bbox_height_px >= min_h and g.occlusion <= max_occ and g.truncation <= max_trunc:
            out.append(g)
    if missing:
        warnings.warn("labels without difficulty fields pass every difficulty filter", RuntimeWarning, stacklevel=2)
    return out


@dataclass
class EvalResult:
    class_name: str
    difficulty: str
    iou_threshold: float
    curve: PrCurve
    num_gt: int
    num_det: int


def evaluate(
    frames: Sequence[tuple[Sequence, Sequence[ObjectLabel]]],
    class_table: dict[str, int],
    iou_thresholds=(0.5, 0.7),
    difficulties=("easy", "moderate", "hard"),
    mode: str = "11",
) -> list[EvalResult]:
    """BEV AP over frames of ``(detections, ground-truth labels)``.

    Ground truth outside the difficulty bucket is ignored: detections
    matching such objects count neither as TP nor FP, as in the KITTI
    protocol.
    """
    results = []
    for name, cid in class_table.items():
        for diff in difficulties:
            for thr in iou_thresholds:
                flags, scores, num_gt, num_det = [], [], 0, 0
                for dets, gts in frames:
                    cls_gts = [g for g in gts if g.class_name == name]
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        keep = {id(g) for g in difficulty_filter(cls_gts, diff)}
                    cares = [id(g) in keep for g in cls_gts]
                    dets = sorted((d for d in dets if d.class_id == cid), key=lambda d: -d.score)
                    g_rects = [RotatedRect.from_label(g) for g in cls_gts]
                    d_rects = [RotatedRect.from_detection(d) for d in dets]
                    m = match(d_rects, [cid] * len(dets), g_rects, [cid] * len(g_rects), thr)
                    for d, ok, gi in zip(dets, m.tp, m.matched_gt):
                        if ok and not cares[gi]:
                            continue
                        flags.append(bool(ok))
                        scores.append(d.score)
                    num_gt += sum(cares)
                    num_det += len(dets)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    curve = average_precision(flags, scores, num_gt, mode)
                results.append(EvalResult(name, diff, thr, curve, num_gt, num_det))
    return results


def report_csv(results: Sequence[EvalResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "difficulty", "iou", "ap", "num_gt", "num_det", "mode", "recall", "precision"])
    for r in results:
        w.writerow(
            [
                r.class_name,
                r.difficulty,
                f"{r.iou_threshold:.2f}",
                f"{r.curve.ap:.6f}",
                r.num_gt,
                r.num_det,
                r.curve.mode,
                " ".join(f"{v:.4f}" for v in r.curve.recall),
                " ".join(f"{v:.4f}" for v in r.curve.precision),
            ]
        )
    return buf.getvalue()
