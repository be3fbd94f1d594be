import numpy as np
import pytest

from maest.benchkit import (
    BenchConfig,
    BenchRow,
    ProbeFixture,
    emit_report,
    load_report_csv,
    measure_throughput,
    synthetic_spectrogram,
    sweep,
)
from maest.errors import ConfigError, EmptyInput
from maest.melfront import MelSpectrogram, frames_for_duration
from maest.model import EmbeddingSpec, Maest
from maest.patchgrid import PatchoutSpec, grid_dims

from toyfix import make_toy_spec, toy_model_cfg


@pytest.fixture(scope="module")
def toy_model():
    return Maest(toy_model_cfg(t_p_max=40), rng=np.random.default_rng(0))


def _toy_bench_cfg(**kw):
    base = dict(t_keep_grid=(1, 2), f_rows_grid=(0,), repetitions=3, warmup=1,
                threads=0, segment_s=1.0, batch=1, min_time_s=0.0)
    base.update(kw)
    return BenchConfig(**base)


def _toy_spec(frames=128, seed=1):
    rng = np.random.default_rng(seed)
    return MelSpectrogram(data=rng.normal(0, 1, (96, frames)).astype(np.float32))


class TestMeasure:
    def test_kept_tokens_formula(self, toy_model):
        spec = _toy_spec(frames=128)  # grid 9 x 12
        row = measure_throughput(toy_model, 2, 0, _toy_bench_cfg(), spec=spec)
        assert row.kept_tokens == 9 * 6 + 2
        row = measure_throughput(toy_model, 1, 3, _toy_bench_cfg(), spec=spec)
        assert row.kept_tokens == 6 * 12 + 2

    def test_paper_grid_kept_tokens(self):
        # 30 s grid 9x186 at T=2, rows=0 -> 9*93 + 2 = 839
        spec = PatchoutSpec.inference(t_keep=2, f_rows=0)
        assert spec.kept_count(9, 186) + 2 == 839

    def test_stability_of_repeated_medians(self, toy_model):
        spec = _toy_spec()
        cfg = _toy_bench_cfg(repetitions=5, min_time_s=0.01)
        a = measure_throughput(toy_model, 1, 0, cfg, spec=spec)
        b = measure_throughput(toy_model, 1, 0, cfg, spec=spec)
        assert abs(a.throughput - b.throughput) / max(a.throughput, b.throughput) < 0.10

    def test_auto_batch_growth_recorded(self, toy_model):
        spec = _toy_spec(frames=32)
        cfg = _toy_bench_cfg(min_time_s=0.05, max_batch=8)
        row = measure_throughput(toy_model, 2, 0, cfg, spec=spec)
        assert row.batch > 1  # tiny workload forces growth

    def test_throughput_positive(self, toy_model):
        row = measure_throughput(toy_model, 1, 0, _toy_bench_cfg(), spec=_toy_spec())
        assert row.throughput > 0
        assert row.iqr >= 0

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BenchConfig(repetitions=2)
        with pytest.raises(ConfigError):
            BenchConfig(warmup=0)


class TestSweep:
    def test_single_setting_single_row(self, toy_model):
        cfg = _toy_bench_cfg(t_keep_grid=(1,), f_rows_grid=(0,))
        rows = sweep(toy_model, cfg, spec=_toy_spec())
        assert len(rows) == 1

    def test_full_grid_row_count_and_token_monotonicity(self, toy_model):
        cfg = _toy_bench_cfg(t_keep_grid=(1, 2, 3, 5, 10), f_rows_grid=(0, 3, 4))
        rows = sweep(toy_model, cfg, spec=_toy_spec())
        assert len(rows) == 15
        for f_rows in (0, 3, 4):
            tokens = [r.kept_tokens for r in rows if r.f_rows == f_rows]
            assert tokens == sorted(tokens, reverse=True)
            assert len(set(tokens)) == len(tokens)  # strictly decreasing in T

    def test_probe_fixture_adds_map(self, toy_model):
        rng = np.random.default_rng(2)
        ids = [f"t{i}" for i in range(36)]
        specs, labels = {}, {}
        for i, tid in enumerate(ids):
            lab = [i % 4]
            specs[tid] = make_toy_spec(lab, rng)
            row = np.zeros(4, dtype=np.uint8)
            row[lab[0]] = 1
            labels[tid] = row
        splits = {"train": ids[:20], "valid": ids[20:28], "test": ids[28:]}
        fixture = ProbeFixture(specs=specs, labels=labels, splits=splits,
                               espec=EmbeddingSpec.parse("2:cls,2:avg"),
                               model=toy_model, seg_frames=64, probe_epochs=8)
        cfg = _toy_bench_cfg(t_keep_grid=(1, 4), f_rows_grid=(0,))
        rows = sweep(toy_model, cfg, probe_fixture=fixture)
        assert all(r.map is not None and 0.0 <= r.map <= 1.0 for r in rows)


class TestReports:
    def _rows(self):
        return [
            BenchRow(setting="T=1,F=0", t_keep=1, f_rows=0, kept_tokens=110,
                     throughput=123.456, iqr=1.5, batch=1, threads=1, map=0.91),
            BenchRow(setting="T=2,F=0", t_keep=2, f_rows=0, kept_tokens=56,
                     throughput=222.0, iqr=2.25, batch=1, threads=1, map=None),
        ]

    def test_csv_line_count(self, tmp_path):
        paths = emit_report(self._rows(), tmp_path)
        lines = (tmp_path / "bench.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + 2 rows
        assert lines[0] == "setting,kept_tokens,throughput_median,throughput_iqr,map"
        assert {p.name for p in paths} == {"bench.csv", "bench.json"}

    def test_empty_rows(self, tmp_path):
        with pytest.raises(EmptyInput):
            emit_report([], tmp_path)

    def test_csv_round_trip(self, tmp_path):
        rows = self._rows()
        emit_report(rows, tmp_path)
        back = load_report_csv(tmp_path / "bench.csv")
        for row, rec in zip(rows, back):
            assert rec["setting"] == row.setting
            assert rec["kept_tokens"] == row.kept_tokens
            assert rec["throughput_median"] == row.throughput
            assert rec["throughput_iqr"] == row.iqr
            assert rec["map"] == row.map

    def test_gnuplot_file(self, tmp_path):
        paths = emit_report(self._rows(), tmp_path, gnuplot=True)
        assert (tmp_path / "bench.dat").exists()
        lines = (tmp_path / "bench.dat").read_text().strip().splitlines()
        assert len(lines) == 3  # comment header + 2 rows


def test_synthetic_spectrogram_duration():
    spec = synthetic_spectrogram(5.0, seed=0)
    assert spec.frame_count == frames_for_duration(5.0)
    assert spec.band_count == 96
