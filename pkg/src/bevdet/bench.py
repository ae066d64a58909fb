"""Latency harness for the encode / forward / decode stages.

Dense convolutions do the same work whatever the scene holds, so forward
latency should not move with point-cloud occupancy. The harness measures
that directly: stages are timed per frame with a monotonic clock, sparsity
levels are interleaved within each repetition so slow drift hits every
level equally, and BLAS is pinned to one thread.
"""

from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from threadpoolctl import threadpool_limits

from .bev import BevGrid, encode_bev
from .decoder import decode
from .errors import ConfigError
from .lidar_io import PointCloud
from .model import BevDetector

STAGES = ("encode", "forward", "decode")


@dataclass
class StageStats:
    mean: float
    p50: float
    p99: float
    cov: float
    samples: np.ndarray = field(repr=False)

    @classmethod
    def from_samples(cls, us: np.ndarray) -> "StageStats":
        us = np.asarray(us, dtype=np.float64)
        mean = float(us.mean())
        return cls(
            mean=mean,
            p50=float(np.percentile(us, 50)),
            p99=float(np.percentile(us, 99)),
            cov=float(us.std() / mean) if mean > 0 else 0.0,
            samples=us,
        )


@dataclass
class LatencyReport:
    levels: dict[str, dict[str, StageStats]]  # level -> stage -> stats (microseconds)
    bound: float

    @property
    def forward_means(self) -> dict[str, float]:
        return {lvl: st["forward"].mean for lvl, st in self.levels.items()}

    @property
    def forward_spread(self) -> float:
        """Largest relative gap between forward means of any two levels."""
        means = np.array(list(self.forward_means.values()))
        return float((means.max() - means.min()) / means.min())

    @property
    def forward_cov_across_levels(self) -> float:
        means = np.array(list(self.forward_means.values()))
        return float(means.std() / means.mean())

    @property
    def fixed_runtime(self) -> bool:
        return self.forward_spread < self.bound

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "stage", "mean_us", "p50_us", "p99_us", "cov", "n"])
        for lvl, stages in self.levels.items():
            for stage, s in stages.items():
                w.writerow([lvl, stage, f"{s.mean:.3f}", f"{s.p50:.3f}", f"{s.p99:.3f}", f"{s.cov:.5f}", s.samples.size])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'level':>10} {'stage':>8} {'mean us':>11} {'p50 us':>11} {'p99 us':>11} {'CoV':>7}"]
        for lvl, stages in self.levels.items():
            for stage, s in stages.items():
                lines.append(f"{lvl:>10} {stage:>8} {s.mean:11.1f} {s.p50:11.1f} {s.p99:11.1f} {s.cov:7.3f}")
        verdict = "PASS" if self.fixed_runtime else "FAIL"
        lines.append(
            f"forward spread across levels {100 * self.forward_spread:.2f}% "
            f"(bound {100 * self.bound:.1f}%): {verdict}"
        )
        return "\n".join(lines)


def scene_at_occupancy(grid: BevGrid, occupancy: float, seed: int = 0, points_per_cell: int = 2) -> PointCloud:
    """Cloud whose points fill a random ``occupancy`` fraction of grid cells."""
    if not 0.0 <= occupancy <= 1.0:
        raise ConfigError(f"occupancy must lie in [0, 1], got {occupancy}")
    rng = np.random.default_rng(seed)
    ncell = grid.rows * grid.cols
    cells = rng.choice(ncell, size=int(round(occupancy * ncell)), replace=False)
    cells = np.repeat(cells, points_per_cell)
    r, c = np.divmod(cells, grid.cols)
    x = grid.x_max - (r + rng.uniform(0.05, 0.95, r.size)) * grid.delta
    y = grid.y_half - (c + rng.uniform(0.05, 0.95, c.size)) * grid.delta
    z = rng.uniform(grid.z_min, grid.z_max, r.size)
    inten = rng.uniform(0.0, 1.0, r.size)
    return PointCloud(np.column_stack([x, y, z, inten]))


def _timed(fn: Callable, retries: int = 3):
    for _ in range(retries):
        t0 = time.perf_counter_ns()
        out = fn()
        t1 = time.perf_counter_ns()
        if t1 >= t0:
            return out, (t1 - t0) / 1e3
    raise RuntimeError("clock went backwards on every attempt")


def bench_pipeline(
    scenes: Mapping[str, PointCloud],
    model: BevDetector,
    grid: BevGrid,
    repetitions: int = 50,
    warmup: int = 5,
    bound: float = 0.05,
    threshold: float = 0.5,
) -> LatencyReport:
    """Time encode, forward and decode for each named scene.

    ``repetitions`` must be at least 30 and ``warmup`` at least 5.
    """
    if repetitions < 30:
        raise ConfigError(f"need at least 30 repetitions, got {repetitions}")
    if warmup < 5:
        raise ConfigError(f"need at least 5 warmup rounds, got {warmup}")
    if not scenes:
        raise ConfigError("no scenes to benchmark")
    model.eval()
    names = list(scenes)
    times = {n: {s: [] for s in STAGES} for n in names}

    def one(name: str, record: bool) -> None:
        bev, t_enc = _timed(lambda: encode_bev(scenes[name], grid))
        x = bev.planes[None]
        heads, t_fwd = _timed(lambda: model.forward(x))
        _, t_dec = _timed(lambda: decode([h[0] for h in heads], grid, threshold))
        if record:
            for stage, t in zip(STAGES, (t_enc, t_fwd, t_dec)):
                times[name][stage].append(t)

    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        with threadpool_limits(limits=1):
            for _ in range(warmup):
                for n in names:
                    one(n, False)
            for _ in range(repetitions):
                for n in names:
                    one(n, True)
    finally:
        if gc_was_enabled:
            gc.enable()
    levels = {n: {s: StageStats.from_samples(np.array(times[n][s])) for s in STAGES} for n in names}
    return LatencyReport(levels, bound)


def encode_scaling(grid: BevGrid, counts=(10_000, 100_000), repetitions: int = 20, seed: int = 0) -> dict[int, float]:
    """Marginal encode time per point (microseconds) at each point count.

    The median time of encoding a single in-grid point (plane allocation and
    normalization, independent of the point count) is subtracted first.
    """
    rng = np.random.default_rng(seed)
    out = {}
    with threadpool_limits(limits=1):
        one = PointCloud(np.array([[grid.x_max / 2, 0.0, 0.0, 0.5]], dtype=np.float32))
        encode_bev(one, grid)
        base = float(np.median([_timed(lambda: encode_bev(one, grid))[1] for _ in range(repetitions)]))
        for n in counts:
            pts = np.column_stack(
                [
                    rng.uniform(0, grid.x_max, n),
                    rng.uniform(-grid.y_half, grid.y_half, n),
                    rng.uniform(grid.z_min, grid.z_max, n),
                    rng.uniform(0, 1, n),
                ]
            ).astype(np.float32)
            cloud = PointCloud(pts)
            encode_bev(cloud, grid)
            ts = [_timed(lambda: encode_bev(cloud, grid))[1] for _ in range(repetitions)]
            out[n] = max(float(np.median(ts)) - base, 0.0) / n
    return out
