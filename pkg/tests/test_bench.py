import numpy as np
import pytest

from bevdet.bench import LatencyReport, StageStats, bench_pipeline, encode_scaling, scene_at_occupancy
from bevdet.bev import BevGrid, encode_bev
from bevdet.errors import ConfigError
from bevdet.model import BevDetector, ModelConfig


@pytest.fixture(scope="module")
def desk_report():
    grid = BevGrid.desk()
    scenes = {"1%": scene_at_occupancy(grid, 0.01, 0), "50%": scene_at_occupancy(grid, 0.5, 1)}
    return bench_pipeline(scenes, BevDetector(ModelConfig.desk()), grid, repetitions=30, warmup=5)


class TestScenes:
    @pytest.mark.parametrize("occ", [0.0, 0.01, 0.5, 1.0])
    def test_occupancy(self, desk_grid, occ):
        bev = encode_bev(scene_at_occupancy(desk_grid, occ, seed=3), desk_grid)
        assert bev.occupancy_plane.mean() == pytest.approx(occ, abs=1 / (64 * 32))

    def test_bad_occupancy(self, desk_grid):
        with pytest.raises(ConfigError):
            scene_at_occupancy(desk_grid, 1.5)


class TestStats:
    def test_from_samples(self):
        s = StageStats.from_samples(np.array([1.0, 2.0, 3.0, 4.0]))
        assert s.mean == 2.5 and s.p50 == 2.5
        assert s.cov == pytest.approx(np.std([1, 2, 3, 4]) / 2.5)

    def test_spread(self):
        mk = lambda m: {"forward": StageStats.from_samples(np.array([m, m]))}
        report = LatencyReport({"a": mk(100.0), "b": mk(104.0)}, bound=0.05)
        assert report.forward_spread == pytest.approx(0.04) and report.fixed_runtime
        report = LatencyReport({"a": mk(100.0), "b": mk(106.0)}, bound=0.05)
        assert not report.fixed_runtime


class TestBenchPipeline:
    @pytest.mark.parametrize("reps,warmup", [(0, 5), (29, 5), (30, 4)])
    def test_minimums(self, desk_grid, reps, warmup):
        with pytest.raises(ConfigError):
            bench_pipeline({"a": scene_at_occupancy(desk_grid, 0.1)}, BevDetector(ModelConfig.desk()), desk_grid, reps, warmup)

    def test_report_shape(self, desk_report):
        assert set(desk_report.levels) == {"1%", "50%"}
        for stages in desk_report.levels.values():
            assert set(stages) == {"encode", "forward", "decode"}
            for s in stages.values():
                assert s.samples.size == 30 and (s.samples >= 0).all()

    def test_csv_and_summary(self, desk_report):
        lines = desk_report.to_csv().splitlines()
        assert lines[0] == "level,stage,mean_us,p50_us,p99_us,cov,n" and len(lines) == 7
        assert "forward spread across levels" in desk_report.summary()

    def test_repeated_scene_stable(self, desk_grid):
        scene = scene_at_occupancy(desk_grid, 0.1, 2)
        copies = {f"copy{k}": scene for k in range(4)}
        report = bench_pipeline(copies, BevDetector(ModelConfig.desk()), desk_grid, repetitions=30, warmup=5)
        for stage in ("encode", "forward", "decode"):
            p50 = np.array([report.levels[k][stage].p50 for k in copies])
            assert p50.std() / p50.mean() <= 0.10, (stage, p50)


def test_encode_roughly_linear():
    per_point = encode_scaling(BevGrid(), (20_000, 200_000), repetitions=7)
    ratio = per_point[200_000] / per_point[20_000]
    assert 0.5 <= ratio <= 2.0
