import filecmp
import re

import numpy as np
import pytest

from bevdet.bev import BevGrid, load_bev
from bevdet.cli import EXIT_CODES, build_parser, main

DESK = ["--set", "grid.x_max=19.2", "--set", "grid.y_half=4.8", "--set", "grid.delta=0.3"]
ERROR_LINE = re.compile(r"^bevdet: error code=(\d+) kind=(\S+) msg=.*$")


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*"))


def test_synth_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["synth", "--seed", 7, "--frames", 10, "--out", d], capsys)[0] == 0
    assert tree(a) == tree(b)
    assert len(list((a / "velodyne").glob("*.bin"))) == 10
    for rel in tree(a):
        if (a / rel).is_file():
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel


def test_synth_different_seed_differs(tmp_path, capsys):
    run(["synth", "--seed", 1, "--frames", 2, "--out", tmp_path / "a"], capsys)
    run(["synth", "--seed", 2, "--frames", 2, "--out", tmp_path / "b"], capsys)
    bin_a = (tmp_path / "a/velodyne/000000.bin").read_bytes()
    assert bin_a != (tmp_path / "b/velodyne/000000.bin").read_bytes()


def test_encode_empty_bin(tmp_path, capsys):
    src = tmp_path / "empty.bin"
    src.write_bytes(b"")
    out = tmp_path / "out" / "empty.bev"
    out.parent.mkdir()
    code, _, err = run(["encode", src, "-o", out, "--png", tmp_path / "out" / "empty.png"], capsys)
    assert code == 0, err
    bev = load_bev(out, BevGrid())
    assert bev.planes.shape == (3, 512, 256)
    assert not bev.planes.any()
    assert (tmp_path / "out" / "empty.png").stat().st_size > 0


def test_targets_infer_eval_oracle_ap(tmp_path, capsys):
    data = tmp_path / "data"
    assert run(["synth", "--seed", 3, "--frames", 6, "--out", data, *DESK], capsys)[0] == 0
    tgt_dir = tmp_path / "tgt"
    tgt_dir.mkdir()
    for lab in sorted((data / "label_2").glob("*.txt")):
        calib = data / "calib" / lab.name
        code, _, err = run(["targets", lab, "--calib", calib, "-o", tgt_dir / f"{lab.stem}.tgt", *DESK], capsys)
        assert code == 0, err
    tgts = sorted(tgt_dir.glob("*.tgt"))
    code, _, err = run(["infer", "--targets", *tgts, "--out", tmp_path / "det", *DESK], capsys)
    assert code == 0, err
    assert (tmp_path / "det" / "detections.csv").exists()
    report = tmp_path / "report" / "ap.csv"
    code, out, err = run(
        ["eval", "--det", tmp_path / "det" / "kitti", "--labels", data / "label_2",
         "--calib", data / "calib", "--out", report, *DESK],
        capsys,
    )
    assert code == 0, err
    aps = {}
    for line in out.splitlines():
        m = re.match(r"(\S+) (\S+)\s+IoU=(\S+) AP=(\S+) \(gt=(\d+)", line)
        if m and int(m.group(5)) > 0:
            aps[(m.group(1), m.group(2), float(m.group(3)))] = float(m.group(4))
    assert {k[2] for k in aps} == {0.5, 0.7}
    assert all(v == 1.0 for v in aps.values()), aps


def test_describe(capsys):
    code, out, _ = run(["describe", "--set", "model.base_channels=4"], capsys)
    assert code == 0
    assert "params=237126" in out


def test_help_lists_exit_codes(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["encode", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert all(f"  {code}  " in EXIT_CODES for code in range(8))
    assert "exit codes:" in out
    for code, words in [(2, "usage"), (3, "missing input file"), (4, "malformed"), (5, "shape"), (7, "diverged")]:
        assert re.search(rf"^\s+{code}\s+.*{words}", out, re.M), code


def test_every_subcommand_registered():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"encode", "targets", "synth", "train", "infer", "eval", "bench", "describe"}


@pytest.mark.parametrize(
    "argv, code, kind",
    [
        (["encode", "/nonexistent/x.bin", "-o", "{tmp}/x.bev"], 3, "missing-file"),
        (["describe", "--set", "model.nope=1"], 4, "ConfigError"),
        (["describe", "--set", "model.base_channels"], 2, "UsageError"),
        (["infer", "--out", "{tmp}/det"], 2, "UsageError"),
        (["targets", "{tmp}/bad.txt", "-o", "{tmp}/t.tgt"], 4, "MalformedFileError"),
        (["encode", "{tmp}/odd.bin", "-o", "{tmp}/x.bev"], 4, "MalformedFileError"),
    ],
)
def test_error_line_and_code(tmp_path, capsys, argv, code, kind):
    (tmp_path / "bad.txt").write_text("Car 0 0\n")
    (tmp_path / "odd.bin").write_bytes(b"\0" * 10)
    got, _, err = run([a.replace("{tmp}", str(tmp_path)) for a in argv], capsys)
    assert got == code
    lines = err.strip().splitlines()
    assert len(lines) == 1
    m = ERROR_LINE.match(lines[0])
    assert m and int(m.group(1)) == code and m.group(2) == kind


def test_bad_config_file_exit_4(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[grid]\ndelta = banana\n")
    assert run(["describe", "--config", cfg], capsys)[0] == 4


def test_env_override(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("BEVDET_MODEL_BASE_CHANNELS", "4")
    code, out, _ = run(["describe"], capsys)
    assert code == 0 and "params=237126" in out


def test_outputs_stay_in_declared_dirs(tmp_path, capsys, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    run(["synth", "--seed", 1, "--frames", 2, "--out", tmp_path / "data", *DESK], capsys)
    lab = tmp_path / "data/label_2/000000.txt"
    run(["targets", lab, "--calib", tmp_path / "data/calib/000000.txt", "-o", tmp_path / "t/0.tgt", *DESK], capsys)
    run(["infer", "--targets", tmp_path / "t/0.tgt", "--out", tmp_path / "det", *DESK], capsys)
    assert list(work.iterdir()) == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["data", "det", "t", "work"]


def test_train_infer_smoke(tmp_path, capsys):
    data = tmp_path / "data"
    run(["synth", "--seed", 5, "--frames", 2, "--out", data, *DESK], capsys)
    small = [*DESK, "--set", "model.base_channels=2", "--set", "train.max_steps=2", "--set", "train.batch_size=1"]
    code, out, err = run(["train", "--data", data, "--out", tmp_path / "run", *small], capsys)
    assert code == 0, err
    ckpts = sorted((tmp_path / "run").glob("checkpoint*.bin"))
    assert ckpts, tree(tmp_path / "run")
    bev = tmp_path / "000000.bev"
    run(["encode", data / "velodyne/000000.bin", "-o", bev, *small], capsys)
    code, _, err = run(["infer", "--checkpoint", ckpts[-1], "--bev", bev, "--out", tmp_path / "det", *small], capsys)
    assert code == 0, err
    assert (tmp_path / "det/kitti/000000.txt").exists()
    assert np.isfinite(np.loadtxt(tmp_path / "run" / "loss_trace.csv", delimiter=",", skiprows=1)).all()
