"""``bevdet`` command line front end.

Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (bad flags)
  3  missing input file
  4  malformed file or configuration
  5  shape or contract mismatch
  6  synthetic object placement failed
  7  training diverged (non-finite loss)

Failures print one line to stderr:
``bevdet: error code=<n> kind=<kind> msg=<message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .bev import encode_bev, load_bev, save_bev, save_png_preview
from .config import RunConfig
from .decoder import decode, detections_to_csv, detections_to_kitti, targets_to_heads
from .errors import BevDetError, UsageError
from .evaluation import evaluate, report_csv
from .lidar_io import (
    Calibration,
    SceneSpec,
    label_to_kitti_line,
    parse_labels,
    read_calibration,
    read_point_cloud,
    synth_scene,
    write_calibration,
    write_point_cloud,
)
from .model import BevDetector
from .nn.checkpoint import load_checkpoint
from .targets import load_targets, make_targets, save_targets
from .trainer import SceneDataset, train

EXIT_CODES = """exit codes:
  0  success
  1  unexpected internal error
  2  usage error
  3  missing input file
  4  malformed file or configuration
  5  shape or contract mismatch
  6  synthetic object placement failed
  7  training diverged
"""

log = logging.getLogger("bevdet")


def _config(args) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        section, dot, name = key.strip().partition(".")
        if not dot or not section or not name:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides.setdefault(section, {})[name] = raw.strip()
    cfg = RunConfig.load(args.config, env=None)
    if overrides:
        text = "\n".join(
            f"[{sec}]\n" + "\n".join(f"{k} = {v}" for k, v in entries.items()) for sec, entries in overrides.items()
        )
        cfg.merge_text(text, "--set")
        cfg.validate()
    return cfg


def _frame_ids(directory: Path, suffix: str) -> list[str]:
    return sorted(p.stem for p in directory.glob(f"*{suffix}"))


def cmd_encode(args) -> None:
    cfg = _config(args)
    bev = encode_bev(read_point_cloud(args.input).normalized(), cfg.grid())
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_bev(bev, args.output)
    if args.png:
        save_png_preview(bev, args.png)


def cmd_targets(args) -> None:
    cfg = _config(args)
    calib = read_calibration(args.calib) if args.calib else Calibration.identity()
    maps = make_targets(parse_labels(args.labels, calib), cfg.grid(), cfg.class_table())
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    save_targets(maps, args.output)
    for idx, reason in maps.rejected:
        log.warning("label %d rejected: %s", idx, reason)
    if maps.skipped:
        log.info("%d labels outside the grid skipped", maps.skipped)


def cmd_synth(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    for sub in ("velodyne", "label_2", "calib"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    calib = Calibration.kitti_like()
    rng = np.random.default_rng(args.seed)
    lo, hi = cfg.values["synth"]["objects_min"], cfg.values["synth"]["objects_max"]
    for k in range(args.frames):
        spec = SceneSpec(
            seed=int(rng.integers(2**31)), num_objects=int(rng.integers(lo, hi + 1)), **cfg.scene_kwargs()
        )
        cloud, labels = synth_scene(spec)
        fid = f"{k:06d}"
        write_point_cloud(cloud, out / "velodyne" / f"{fid}.bin")
        (out / "label_2" / f"{fid}.txt").write_text("".join(label_to_kitti_line(l, calib) + "\n" for l in labels))
        write_calibration(calib, out / "calib" / f"{fid}.txt")


def load_dataset(root: Path, cfg: RunConfig) -> SceneDataset:
    scenes = []
    for fid in _frame_ids(root / "velodyne", ".bin"):
        calib = read_calibration(root / "calib" / f"{fid}.txt")
        labels = parse_labels(root / "label_2" / f"{fid}.txt", calib)
        scenes.append((read_point_cloud(root / "velodyne" / f"{fid}.bin").normalized(), labels))
    if not scenes:
        raise FileNotFoundError(f"no velodyne/*.bin frames under {root}")
    return SceneDataset(scenes, cfg.grid(), cfg.class_table())


def cmd_train(args) -> None:
    cfg = _config(args)
    dataset = load_dataset(Path(args.data), cfg)
    model = BevDetector(cfg.model_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.to_text())
    result = train(dataset, model, cfg.train_config(), out)
    print(f"trained {result.steps} steps; final epoch mean loss {result.epoch_means[-1]['total']:.5f}")


def cmd_infer(args) -> None:
    cfg = _config(args)
    grid = cfg.grid()
    out = Path(args.out)
    (out / "kitti").mkdir(parents=True, exist_ok=True)
    calib = read_calibration(args.calib) if args.calib else Calibration.kitti_like()
    threshold = cfg.values["decode"]["threshold"]
    min_dist = cfg.values["decode"]["min_distance"] or None
    num_classes = cfg.model_config().num_classes
    names = {v: k for k, v in cfg.class_table().items()}
    frames = {}
    if args.targets:
        for path in sorted(Path(p) for p in args.targets):
            heads = targets_to_heads(load_targets(path), num_classes)
            frames[path.stem] = decode(heads, grid, threshold, min_distance=min_dist)
    else:
        if not args.checkpoint:
            raise UsageError("infer needs --checkpoint (or --targets for oracle heads)")
        model = BevDetector(cfg.model_config())
        load_checkpoint(model, args.checkpoint)
        model.eval()
        for path in sorted(Path(p) for p in args.bev):
            bev = load_bev(path, grid)
            heads = [h[0] for h in model.forward(bev.planes[None])]
            frames[path.stem] = decode(heads, grid, threshold, bev=bev, min_distance=min_dist)
    for fid, dets in frames.items():
        (out / "kitti" / f"{fid}.txt").write_text("".join(l + "\n" for l in detections_to_kitti(dets, calib, names)))
    (out / "detections.csv").write_text(detections_to_csv(frames))


def cmd_eval(args) -> None:
    cfg = _config(args)
    det_dir, label_dir = Path(args.det), Path(args.labels)
    table = cfg.class_table()
    frames = []
    for fid in _frame_ids(label_dir, ".txt"):
        calib = read_calibration(Path(args.calib) / f"{fid}.txt") if args.calib else Calibration.kitti_like()
        gts = parse_labels(label_dir / f"{fid}.txt", calib)
        det_path = det_dir / f"{fid}.txt"
        det_labels = parse_labels(det_path, calib) if det_path.exists() else []
        frames.append(([_label_to_detection(d, table) for d in det_labels], gts))
    ev = cfg.values["eval"]
    results = evaluate(frames, table, ev["iou_thresholds"], mode=ev["mode"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report_csv(results))
    for r in results:
        print(f"{r.class_name} {r.difficulty:<8} IoU={r.iou_threshold:.2f} AP={r.curve.ap:.4f} (gt={r.num_gt}, det={r.num_det})")


def _label_to_detection(lab, table):
    import math

    from .decoder import Detection

    return Detection(
        table.get(lab.class_name, -1),
        lab.score if lab.score is not None else 1.0,
        lab.center,
        lab.dims,
        math.degrees(lab.yaw) % 180.0,
    )


def cmd_bench(args) -> None:
    cfg = _config(args)
    grid = cfg.grid()
    model = BevDetector(cfg.model_config())
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
    b = cfg.values["bench"]
    scenes = {
        f"occ{100 * occ:g}%": bench_mod.scene_at_occupancy(grid, occ, seed=b["seed"]) for occ in b["occupancies"]
    }
    report = bench_mod.bench_pipeline(scenes, model, grid, b["repetitions"], b["warmup"], b["bound"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "latency.csv").write_text(report.to_csv())
    print(report.summary())


def cmd_describe(args) -> None:
    cfg = _config(args)
    model = BevDetector(cfg.model_config())
    print(model.describe())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style run configuration file")
    common.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE", help="override one configuration value"
    )
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bevdet", description=__doc__.splitlines()[0], epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(
            name,
            parents=[common],
            help=help_,
            epilog=EXIT_CODES,
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        sp.set_defaults(func=fn)
        return sp

    sp = add("encode", cmd_encode, "point cloud .bin -> BEV1 raster")
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--png", help="also write a height-plane preview")

    sp = add("targets", cmd_targets, "KITTI labels -> TGT1 target maps")
    sp.add_argument("labels")
    sp.add_argument("--calib")
    sp.add_argument("-o", "--output", required=True)

    sp = add("synth", cmd_synth, "write a seeded synthetic KITTI-layout dataset")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=10)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train on a KITTI-layout dataset directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, "checkpoint + BEV files -> detections")
    sp.add_argument("--checkpoint")
    sp.add_argument("--bev", nargs="*", default=[])
    sp.add_argument("--targets", nargs="*", help="decode oracle heads rendered from TGT1 files instead")
    sp.add_argument("--calib", help="calibration for KITTI result lines")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "detections + labels -> AP report")
    sp.add_argument("--det", required=True, help="directory of KITTI result .txt files")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--calib", help="directory of per-frame calibration files")
    sp.add_argument("--out", required=True, help="report CSV path")

    sp = add("bench", cmd_bench, "latency report across scene occupancies")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", required=True)

    add("describe", cmd_describe, "print the model layer listing")
    return p


def _kind(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, FileNotFoundError):
        return 3, "missing-file"
    if isinstance(exc, BevDetError):
        return exc.exit_code, type(exc).__name__
    return 1, "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (BevDetError, FileNotFoundError) as exc:
        code, kind = _kind(exc)
        msg = str(exc).replace("\n", " ")
        print(f"bevdet: error code={code} kind={kind} msg={msg}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
