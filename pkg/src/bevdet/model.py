"""Hybrid DLA keypoint network: CAM-gated residual down blocks, an iterative
aggregation lattice of up blocks, and three 1x1 prediction heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .nn.layers import (
    Add,
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Module,
    Mul,
    ReLU,
    Sigmoid,
    check_tensor4,
)
from .targets import NUM_ROT_CLASSES


@dataclass
class ModelConfig:
    in_channels: int = 3
    rows: int = 512
    cols: int = 256
    base_channels: int = 32
    levels: int = 5
    cam_levels: tuple[int, ...] = (0, 1, 2)
    dilations: tuple[int, ...] = (1, 1, 2, 2, 2)
    fusion: str = "sum"
    num_classes: int = 2
    box_channels: int = 3
    rot_bins: int = NUM_ROT_CLASSES
    up_kernel: int = 4
    cam_squeeze: int = 4
    cam_pool: int = 7
    seed: int = 0

    def __post_init__(self):
        self.cam_levels = tuple(self.cam_levels)
        self.dilations = tuple(self.dilations)
        div = 2**self.levels
        if self.rows % div or self.cols % div:
            raise ContractError(f"input {self.rows}x{self.cols} not divisible by 2^{self.levels}")
        if len(self.dilations) != self.levels:
            raise ContractError(f"need {self.levels} dilation rates, got {self.dilations}")
        if self.fusion not in ("sum", "concat"):
            raise ContractError(f"fusion must be 'sum' or 'concat', got {self.fusion!r}")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        kw.setdefault("rows", 64)
        kw.setdefault("cols", 32)
        kw.setdefault("base_channels", 4)
        return cls(**kw)


class CamBlock(Module):
    """Context gate: ``x * sigmoid(conv(relu(conv(avgpool(x)))))``."""

    def __init__(self, ch, squeeze=4, pool=7, rng=None):
        super().__init__()
        mid = max(ch // squeeze, 1)
        self.pool = AvgPool2d(pool, stride=1, padding=pool // 2)
        self.squeeze = Conv2d(ch, mid, 1, rng=rng)
        self.relu = ReLU()
        self.expand = Conv2d(mid, ch, 1, rng=rng)
        self.gate = Sigmoid()
        self.mul = Mul()

    def forward(self, x):
        g = self.gate(self.expand(self.relu(self.squeeze(self.pool(x)))))
        return self.mul(x, g)

    def backward(self, dout):
        dx, dg = self.mul.backward(dout)
        dg = self.squeeze.backward(self.relu.backward(self.expand.backward(self.gate.backward(dg))))
        return dx + self.pool.backward(dg)


class ResidualUnit(Module):
    """conv-bn-relu, conv-bn, identity (or 1x1 projected) skip, relu."""

    def __init__(self, in_ch, out_ch, dilation=1, rng=None):
        super().__init__()
        d = dilation
        self.conv1 = Conv2d(in_ch, out_ch, 3, padding=d, dilation=d, rng=rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, padding=d, dilation=d, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        self.proj = Conv2d(in_ch, out_ch, 1, rng=rng) if in_ch != out_ch else None
        self.add = Add()
        self.relu2 = ReLU()

    def forward(self, x):
        y = self.bn2(self.conv2(self.relu1(self.bn1(self.conv1(x)))))
        skip = self.proj(x) if self.proj is not None else x
        return self.relu2(self.add(y, skip))

    def backward(self, dout):
        dy, dskip = self.add.backward(self.relu2.backward(dout))
        dx = self.conv1.backward(self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(dy)))))
        return dx + (self.proj.backward(dskip) if self.proj is not None else dskip)


class DownBlock(Module):
    """Residual feature extractor returning full- and half-resolution outputs."""

    def __init__(self, in_ch, ch, dilation=1, cam=False, emit_half=True, squeeze=4, pool=7, rng=None):
        super().__init__()
        self.out_ch = ch
        self.cam = CamBlock(in_ch, squeeze, pool, rng=rng) if cam else None
        self.res = ResidualUnit(in_ch, ch, dilation, rng=rng)
        self.emit_half = emit_half
        if emit_half:
            self.down = AvgPool2d(2, stride=2)
            self.widen = Conv2d(ch, 2 * ch, 1, rng=rng)

    def forward(self, x):
        check_tensor4(x)
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ContractError(f"down block needs even spatial dims, got {x.shape}")
        same = self.res(self.cam(x) if self.cam is not None else x)
        half = self.widen(self.down(same)) if self.emit_half else None
        return same, half

    def backward(self, d_same, d_half=None):
        if d_half is not None:
            d_same = d_same + self.down.backward(self.widen.backward(d_half))
        dx = self.res.backward(d_same)
        return self.cam.backward(dx) if self.cam is not None else dx


class UpBlock(Module):
    """Upsample ``low`` x2, project to the skip width, fuse, then conv-relu-bn."""

    def __init__(self, low_ch, skip_ch, fusion="sum", k=4, rng=None):
        super().__init__()
        self.fusion = fusion
        self.skip_ch = skip_ch
        self.up = ConvTranspose2d(low_ch, low_ch, k, rng=rng)
        self.proj = Conv2d(low_ch, skip_ch, 1, rng=rng)
        fused = skip_ch if fusion == "sum" else 2 * skip_ch
        self.conv = Conv2d(fused, skip_ch, 3, padding=1, rng=rng)
        self.relu = ReLU()
        self.bn = BatchNorm2d(skip_ch)
        self.add = Add() if fusion == "sum" else None

    def forward(self, low, skip):
        check_tensor4(low, "low_res")
        check_tensor4(skip, "skip")
        if (2 * low.shape[2], 2 * low.shape[3]) != skip.shape[2:]:
            raise ContractError(f"up block: low-res {low.shape} is not half of skip {skip.shape}")
        u = self.proj(self.up(low))
        fused = self.add(u, skip) if self.add is not None else np.concatenate([u, skip], axis=1)
        return self.bn(self.relu(self.conv(fused)))

    def backward(self, dout):
        dfused = self.conv.backward(self.relu.backward(self.bn.backward(dout)))
        if self.add is not None:
            du, dskip = self.add.backward(dfused)
        else:
            du, dskip = dfused[:, : self.skip_ch], dfused[:, self.skip_ch :]
        return self.up.backward(self.proj.backward(du)), dskip

    def __call__(self, low, skip):
        return self.forward(low, skip)


class BevDetector(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.widths
        self.downs = []
        in_ch = cfg.in_channels
        for i, ch in enumerate(widths):
            self.downs.append(
                DownBlock(
                    in_ch,
                    ch,
                    dilation=cfg.dilations[i],
                    cam=i in cfg.cam_levels,
                    emit_half=i < cfg.levels - 1,
                    squeeze=cfg.cam_squeeze,
                    pool=cfg.cam_pool,
                    rng=rng,
                )
            )
            in_ch = 2 * ch
        # node (i, j): level i, aggregation step j >= 1
        self.node_ids = [(i, j) for j in range(1, cfg.levels) for i in range(cfg.levels - j)]
        self.ups = [UpBlock(widths[i + 1], widths[i], cfg.fusion, cfg.up_kernel, rng=rng) for i, _ in self.node_ids]
        self.class_head = Conv2d(widths[0], cfg.num_classes, 1, rng=rng)
        self.box_head = Conv2d(widths[0], cfg.box_channels, 1, rng=rng)
        self.rot_head = Conv2d(widths[0], cfg.rot_bins, 1, rng=rng)

    def forward(self, x):
        check_tensor4(x)
        cfg = self.cfg
        if x.shape[1:] != (cfg.in_channels, cfg.rows, cfg.cols):
            raise ContractError(
                f"model expects (N, {cfg.in_channels}, {cfg.rows}, {cfg.cols}), got {x.shape}"
            )
        nodes = {}
        h = x
        for i, block in enumerate(self.downs):
            nodes[i, 0], h = block(h)
        for (i, j), up in zip(self.node_ids, self.ups):
            nodes[i, j] = up(nodes[i + 1, j - 1], nodes[i, j - 1])
        feat = nodes[0, cfg.levels - 1]
        return self.class_head(feat), self.box_head(feat), self.rot_head(feat)

    def backward(self, d_class, d_box, d_rot):
        cfg = self.cfg
        top = (0, cfg.levels - 1)
        grads = {
            top: self.class_head.backward(d_class) + self.box_head.backward(d_box) + self.rot_head.backward(d_rot)
        }

        def acc(key, g):
            grads[key] = grads[key] + g if key in grads else g

        for (i, j), up in reversed(list(zip(self.node_ids, self.ups))):
            d_low, d_skip = up.backward(grads.pop((i, j)))
            acc((i + 1, j - 1), d_low)
            acc((i, j - 1), d_skip)
        d_half = None
        for i in reversed(range(cfg.levels)):
            d_half = self.downs[i].backward(grads.pop((i, 0)), d_half)
        return d_half

    def describe(self) -> str:
        cfg = self.cfg
        lines = [
            f"BevDetector input=({cfg.in_channels},{cfg.rows},{cfg.cols}) base={cfg.base_channels} "
            f"levels={cfg.levels} fusion={cfg.fusion} params={param_count(self)}"
        ]
        for i, w in enumerate(cfg.widths):
            lines.append(
                f"level {i}: width {w} at {cfg.rows >> i}x{cfg.cols >> i}, dilation {cfg.dilations[i]}"
                f"{', CAM' if i in cfg.cam_levels else ''}"
            )
        for name, mod in self.named_modules():
            if not mod.params or not name:
                continue
            shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in mod.params.items())
            lines.append(f"{name:<28s} {type(mod).__name__:<16s} {shapes}")
        return "\n".join(lines)


def param_count(model: Module) -> int:
    return int(sum(p.size for _, p, _ in model.named_parameters()))
