"""Adam and the seeded end-to-end training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bev import BevGrid, encode_bev
from .errors import ContractError, TrainingDiverged
from .lidar_io import ObjectLabel, PointCloud, SceneSpec, augment, synth_scene
from .losses import LossVariant, LossWeights, class_weights_from_freq, label_frequencies, total_loss
from .model import BevDetector
from .nn.checkpoint import save_checkpoint
from .targets import DEFAULT_CLASS_TABLE, NUM_ROT_CLASSES, make_targets

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 50
    max_steps: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    accumulate: int = 1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    variant: LossVariant = field(default_factory=LossVariant)
    class_eps: float = 1.02
    hflip: bool = False
    rotate: bool = False

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Desk-scale schedule: batch 4, 2000 steps, lr 1e-2, flip and rotation on."""
        kw.setdefault("batch_size", 4)
        kw.setdefault("epochs", 10_000)
        kw.setdefault("max_steps", 2000)
        kw.setdefault("lr", 1e-2)
        kw.setdefault("hflip", True)
        kw.setdefault("rotate", True)
        return cls(**kw)

    def __post_init__(self):
        if self.batch_size < 1 or self.accumulate < 1:
            raise ContractError("batch_size and accumulate must be >= 1")
        if not self.lr >= 0:
            raise ContractError(f"learning rate must be >= 0, got {self.lr}")


class Adam:
    """Adam with bias correction over a model's named parameters."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ContractError(f"{k}: gradient {g.shape} vs parameter {p.shape}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            elif self.m[k].shape != p.shape:
                raise ContractError(f"{k}: optimizer state {self.m[k].shape} vs parameter {p.shape}")
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def adam_step(model, optimizer: Adam) -> None:
    params, grads = {}, {}
    for name, p, g in model.named_parameters():
        params[name], grads[name] = p, g
    optimizer.step(params, grads)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


@dataclass
class Frame:
    bev: np.ndarray  # (3, rows, cols) float32
    class_map: np.ndarray
    box_map: np.ndarray
    rotbin_map: np.ndarray


class SceneDataset:
    """Labelled point clouds rasterized on demand, with optional augmentation."""

    def __init__(self, scenes: Sequence[tuple[PointCloud, list[ObjectLabel]]], grid: BevGrid, class_table=None):
        self.scenes = list(scenes)
        self.grid = grid
        self.class_table = dict(class_table or DEFAULT_CLASS_TABLE)
        self._plain = [self._frame(c, l) for c, l in self.scenes]

    def __len__(self) -> int:
        return len(self.scenes)

    def _frame(self, cloud, labels) -> Frame:
        t = make_targets(labels, self.grid, self.class_table)
        return Frame(encode_bev(cloud, self.grid).planes, t.class_map, t.box_map, t.rotbin_map)

    def frame(self, i: int, rng: np.random.Generator | None = None, hflip=False, rotate=False) -> Frame:
        if rng is None or not (hflip or rotate):
            return self._plain[i]
        cloud, labels = self.scenes[i]
        if hflip and rng.random() < 0.5:
            cloud, labels = augment(cloud, labels, "hflip")
        if rotate:
            cloud, labels = augment(cloud, labels, "global_rotation", rng)
        return self._frame(cloud, labels)

    @property
    def num_classes(self) -> int:
        return max(self.class_table.values()) + 1

    def class_frequencies(self) -> np.ndarray:
        return label_frequencies([f.class_map for f in self._plain], self.num_classes)

    def rotation_frequencies(self) -> np.ndarray:
        return label_frequencies([f.rotbin_map for f in self._plain], NUM_ROT_CLASSES)

    @classmethod
    def synthetic(cls, n: int, grid: BevGrid, seed: int = 0, objects=(1, 3), **spec_kw) -> "SceneDataset":
        """``n`` scenes with a per-scene seed derived from ``seed``."""
        rng = np.random.default_rng(seed)
        scenes = []
        spec_kw.setdefault("x_range", (0.0, grid.x_max))
        spec_kw.setdefault("y_range", (-grid.y_half, grid.y_half))
        for k in range(n):
            count = int(rng.integers(objects[0], objects[1] + 1))
            spec = SceneSpec(seed=int(rng.integers(2**31)), num_objects=count, **spec_kw)
            scenes.append(synth_scene(spec))
        return cls(scenes, grid)


def collate(frames: Sequence[Frame]):
    x = np.stack([f.bev for f in frames]).astype(np.float32)
    targets = (
        np.stack([f.class_map for f in frames]),
        np.stack([f.box_map for f in frames]).astype(np.float32),
        np.stack([f.rotbin_map for f in frames]),
    )
    return x, targets


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)  # one row per optimizer step
    epoch_means: list[dict] = field(default_factory=list)
    steps: int = 0
    class_weights: np.ndarray | None = None
    rot_weights: np.ndarray | None = None

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "step", "L_total", "L_kp", "L_box", "L_rot"])
        for row in self.trace:
            w.writerow([row["epoch"], row["step"], *(repr(row[k]) for k in ("total", "keypoints", "box", "rotation"))])
        return buf.getvalue()


def train(
    dataset: SceneDataset,
    model: BevDetector,
    config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Seeded minibatch training; a pure function of (seed, config, dataset).

    Class and rotation-bin weights are computed once from the dataset's
    un-augmented targets. A checkpoint is written to ``out_dir`` after each
    epoch; a non-finite loss raises ``TrainingDiverged`` and leaves the last
    good checkpoint in place.
    """
    cfg = model.cfg
    if dataset.grid.shape != (cfg.rows, cfg.cols):
        raise ContractError(f"dataset grid {dataset.grid.shape} vs model input {(cfg.rows, cfg.cols)}")
    if len(dataset) == 0:
        raise ContractError("empty dataset")
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    result = TrainResult(
        class_weights=class_weights_from_freq(dataset.class_frequencies(), config.class_eps),
        rot_weights=class_weights_from_freq(dataset.rotation_frequencies(), config.class_eps),
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model.train()
    step = 0
    micro = 0
    model.zero_grad()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        rows = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            frames = [dataset.frame(int(i), rng, config.hflip, config.rotate) for i in idx]
            x, targets = collate(frames)
            heads = model.forward(x)
            total, terms, grads = total_loss(
                heads, targets, config.loss_weights, result.class_weights, result.rot_weights, config.variant
            )
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            scale = 1.0 / config.accumulate
            model.backward(*(g * scale for g in grads))
            micro += 1
            if micro % config.accumulate:
                continue
            adam_step(model, opt)
            model.zero_grad()
            step += 1
            row = {"epoch": epoch, "step": step, "total": total, **terms}
            rows.append(row)
            result.trace.append(row)
            if config.max_steps is not None and step >= config.max_steps:
                break
        if rows:
            means = {k: float(np.mean([r[k] for r in rows])) for k in ("total", "keypoints", "box", "rotation")}
            result.epoch_means.append({"epoch": epoch, **means})
            log.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in means.items()))
        if out is not None:
            save_checkpoint(model, out / "checkpoint.bin")
            (out / "loss_trace.csv").write_text(result.trace_csv())
        if config.max_steps is not None and step >= config.max_steps:
            break
    result.steps = step
    model.eval()
    return result
