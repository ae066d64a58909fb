"""Detection losses; every function returns ``(loss, gradient)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .targets import TargetMaps


@dataclass(frozen=True)
class LossWeights:
    keypoints: float = 1.0
    box: float = 0.98
    rotation: float = 0.95

    def __post_init__(self):
        if min(self.keypoints, self.box, self.rotation) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass(frozen=True)
class LossVariant:
    """Ablation switches: classification ``ce``/``focal``, regression ``smooth_l1``/``l1``."""

    classification: str = "ce"
    regression: str = "smooth_l1"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.classification not in ("ce", "focal"):
            raise ContractError(f"unknown classification loss {self.classification!r}")
        if self.regression not in ("smooth_l1", "l1"):
            raise ContractError(f"unknown regression loss {self.regression!r}")


def class_weights_from_freq(frequencies, eps: float = 1.02) -> np.ndarray:
    """``w_c = 1 / ln(f_c + eps)``; ``eps`` must exceed 1 so every weight is positive."""
    if not eps > 1.0:
        raise ContractError(f"eps must be > 1, got {eps}")
    f = np.asarray(frequencies, dtype=np.float64)
    if np.any((f < 0) | (f > 1)):
        raise ContractError("class frequencies must lie in [0, 1]")
    return 1.0 / np.log(f + eps)


def label_frequencies(label_maps, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.float64)
    total = 0
    for m in label_maps:
        counts += np.bincount(np.asarray(m).ravel(), minlength=num_classes)[:num_classes]
        total += np.asarray(m).size
    return counts / max(total, 1)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> None:
    if logits.ndim != 4 or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ContractError(f"logits {logits.shape} and labels {labels.shape} do not line up")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def weighted_ce(logits: np.ndarray, labels: np.ndarray, weights=None):
    """Mean over pixels of ``-w[y] log softmax(logits)[y]``."""
    _check_labels(logits, labels)
    k = logits.shape[1]
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w <= 0):
        raise ContractError(f"need {k} positive class weights, got {w}")
    logp = _log_softmax(logits)
    onehot = np.eye(k, dtype=np.float64)[labels].transpose(0, 3, 1, 2)
    wy = w[labels]
    npix = labels.size
    loss = -(wy * np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]).sum() / npix
    grad = wy[:, None] * (np.exp(logp) - onehot) / npix
    return float(loss), grad.astype(logits.dtype)


def focal_loss(logits: np.ndarray, labels: np.ndarray, gamma: float = 2.0, alpha: float = 0.25):
    """Mean over pixels of ``-alpha (1 - p_t)^gamma log p_t``."""
    _check_labels(logits, labels)
    k = logits.shape[1]
    logp = _log_softmax(logits)
    p = np.exp(logp)
    logpt = np.take_along_axis(logp, labels[:, None], axis=1)
    pt = np.exp(logpt)
    one_m = np.clip(1.0 - pt, 0.0, None)
    npix = labels.size
    loss = -(alpha * one_m**gamma * logpt).sum() / npix
    # dL/dz_k = alpha * [gamma (1-pt)^(gamma-1) pt log pt - (1-pt)^gamma] * (onehot_k - p_k)
    if gamma == 0:
        lead = np.zeros_like(pt)
    else:
        lead = gamma * np.where(one_m > 0, one_m ** (gamma - 1), 0.0) * pt * logpt
    coef = alpha * (lead - one_m**gamma)
    onehot = np.eye(k, dtype=np.float64)[labels].transpose(0, 3, 1, 2)
    grad = coef * (onehot - p) / npix
    return float(loss), grad.astype(logits.dtype)


def smooth_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Mean over masked elements of the Huber-style piecewise loss (threshold 1).

    ``mask`` is ``(N, H, W)`` and selects whole pixels of ``(N, C, H, W)``
    predictions; an empty mask gives zero loss and zero gradient.
    """
    return _masked_regression(pred, target, mask, "smooth_l1")


def l1_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    return _masked_regression(pred, target, mask, "l1")


def _masked_regression(pred, target, mask, kind):
    if pred.shape != target.shape or mask.shape != (pred.shape[0], *pred.shape[2:]):
        raise ContractError(f"pred {pred.shape}, target {target.shape}, mask {mask.shape} do not match")
    m = mask.astype(bool)[:, None]
    count = int(m.sum()) * pred.shape[1]
    grad = np.zeros_like(pred)
    if count == 0:
        return 0.0, grad
    x = (pred.astype(np.float64) - target) * m
    ax = np.abs(x)
    if kind == "smooth_l1":
        vals = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
        g = np.where(ax < 1.0, x, np.sign(x))
    else:
        vals = ax
        g = np.sign(x)
    loss = (vals * m).sum() / count
    grad[...] = g * m / count
    return float(loss), grad


def total_loss(
    heads,
    targets: TargetMaps | tuple,
    weights: LossWeights = LossWeights(),
    class_weights=None,
    rot_weights=None,
    variant: LossVariant = LossVariant(),
):
    """Weighted sum of keypoint, box and rotation losses.

    ``targets`` is a ``TargetMaps`` or a batched tuple
    ``(class_map (N,H,W), box_map (N,3,H,W), rotbin_map (N,H,W))``.
    Returns ``(total, terms, (d_class, d_box, d_rot))`` where ``terms`` maps
    ``keypoints``/``box``/``rotation`` to unweighted values.
    """
    cls_logits, box, rot_logits = heads
    if isinstance(targets, TargetMaps):
        cls_map, box_map, rot_map = targets.class_map[None], targets.box_map[None], targets.rotbin_map[None]
    else:
        cls_map, box_map, rot_map = targets
    n, _, h, w = cls_logits.shape
    for name, arr in (("box", box), ("rotation", rot_logits)):
        if arr.shape[0] != n or arr.shape[2:] != (h, w):
            raise ContractError(f"{name} head {arr.shape} does not match class head {cls_logits.shape}")
    if box.shape != box_map.shape:
        raise ContractError(f"box head {box.shape} vs target {box_map.shape}")

    if variant.classification == "focal":
        l_kp, g_kp = focal_loss(cls_logits, cls_map, variant.focal_gamma, variant.focal_alpha)
    else:
        l_kp, g_kp = weighted_ce(cls_logits, cls_map, class_weights)
    reg = smooth_l1 if variant.regression == "smooth_l1" else l1_loss
    l_box, g_box = reg(box, box_map, cls_map > 0)
    l_rot, g_rot = weighted_ce(rot_logits, rot_map, rot_weights)

    total = weights.keypoints * l_kp + weights.box * l_box + weights.rotation * l_rot
    terms = {"keypoints": l_kp, "box": l_box, "rotation": l_rot}
    grads = (
        (weights.keypoints * g_kp).astype(cls_logits.dtype),
        (weights.box * g_box).astype(box.dtype),
        (weights.rotation * g_rot).astype(rot_logits.dtype),
    )
    return total, terms, grads


__all__ = [
    "LossWeights",
    "LossVariant",
    "class_weights_from_freq",
    "label_frequencies",
    "weighted_ce",
    "focal_loss",
    "smooth_l1",
    "l1_loss",
    "total_loss",
]
