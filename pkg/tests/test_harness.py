"""Harness tests: metrics IO, export aggregation, config, small determinism runs."""

import math

import numpy as np
import pytest

from mirror.harness.config import ExperimentConfig
from mirror.harness.export import export_figure_data
from mirror.harness.metrics import COLUMNS, MetricsRow, read_metrics, write_metrics


def make_row(**kw):
    base = dict(
        method="nc", domain="driving", variant="transfer", data_fraction=0.2,
        persona="d00", seed=1, episode=0, scenario=1, task_return=-12.0,
        collisions=1, steps=20, visual_items=0.0, verbal_utterances=0.0,
        comm_cost=0.0, nll=None,
    )
    base.update(kw)
    return MetricsRow(**base)


class TestMetricsIO:
    def test_round_trip_exact(self, tmp_path):
        rows = [
            make_row(),
            make_row(method="mirror", nll=0.123456789012345, task_return=-7.25,
                     visual_items=3.0, comm_cost=0.09),
        ]
        path = tmp_path / "metrics.csv"
        write_metrics(path, rows)
        loaded = read_metrics(path)
        assert loaded == rows

    def test_same_rows_same_bytes(self, tmp_path):
        rows = [make_row(episode=i, task_return=-float(i) / 3) for i in range(5)]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics(a, rows)
        write_metrics(b, rows)
        assert a.read_bytes() == b.read_bytes()

    def test_reader_rejects_wrong_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("method,domain\nnc,driving\n")
        with pytest.raises(ValueError):
            read_metrics(path)


class TestExport:
    def test_empty_metrics_header_only(self, tmp_path):
        out = export_figure_data([], "perf_comm", tmp_path / "t.csv")
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 1 and lines[0].startswith("method,")

    def test_single_seed_zero_stderr(self, tmp_path):
        rows = [make_row(method="mirror", nll=0.5)]
        out = export_figure_data(rows, "nll_curve", tmp_path / "t.csv")
        line = out.read_text().strip().split("\n")[1].split(",")
        assert float(line[3]) == 0.0

    def test_aggregation_matches_recompute_oracle(self, tmp_path):
        rng = np.random.default_rng(5)
        rows = []
        for method in ("nc", "mirror"):
            for ep in range(12):
                rows.append(make_row(
                    method=method, episode=ep,
                    task_return=float(rng.normal(-20, 5)),
                    collisions=int(rng.integers(4)),
                    visual_items=float(rng.integers(6)),
                    verbal_utterances=float(rng.integers(3)),
                ))
        out = export_figure_data(rows, "perf_comm", tmp_path / "t.csv")
        lines = out.read_text().strip().split("\n")[1:]
        for line in lines:
            parts = line.split(",")
            method = parts[0]
            sample = [r.task_return for r in rows if r.method == method]
            mean = sum(sample) / len(sample)
            var = sum((v - mean) ** 2 for v in sample) / (len(sample) - 1)
            se = math.sqrt(var / len(sample))
            assert float(parts[1]) == pytest.approx(mean, rel=1e-12)
            assert float(parts[2]) == pytest.approx(se, rel=1e-12)
            assert int(parts[9]) == len(sample)


class TestConfig:
    def test_yaml_round_trip(self, tmp_path):
        cfg = ExperimentConfig(methods=("nc", "im"), personas=("d00", "d01"), episodes=4)
        path = tmp_path / "cfg.yaml"
        cfg.to_yaml(path)
        loaded = ExperimentConfig.from_yaml(path)
        assert loaded == cfg

    def test_invalid_method_rejected(self):
        with pytest.raises(Exception):
            ExperimentConfig(methods=("nonsense",))

    def test_invalid_fraction_rejected(self):
        with pytest.raises(Exception):
            ExperimentConfig(data_fraction=0.3)


class TestSmallExperiments:
    def test_nc_logs_zero_communication(self, tmp_path):
        from mirror.harness.experiment import run_experiment

        cfg = ExperimentConfig(
            methods=("nc",), personas=("d00",), episodes=3,
            workdir=str(tmp_path / "run"), root_seed=5,
        )
        path = run_experiment(cfg)
        rows = read_metrics(path)
        assert len(rows) == 3
        assert all(r.visual_items == 0 and r.verbal_utterances == 0 and r.comm_cost == 0
                   for r in rows)

    def test_rerun_is_byte_identical(self, tmp_path):
        from mirror.harness.experiment import run_experiment

        outs = []
        for name in ("one", "two"):
            cfg = ExperimentConfig(
                methods=("nc", "im"), personas=("d01",), episodes=2,
                workdir=str(tmp_path / name), root_seed=31,
            )
            outs.append(run_experiment(cfg).read_bytes())
        assert outs[0] == outs[1]

    def test_im_oracle_beats_nc_on_average(self, tmp_path):
        from mirror.harness.experiment import run_experiment

        cfg = ExperimentConfig(
            methods=("nc", "im"), personas=("d00",), episodes=8,
            workdir=str(tmp_path / "run"), root_seed=11,
        )
        rows = read_metrics(run_experiment(cfg))
        nc = [r.task_return for r in rows if r.method == "nc"]
        im = [r.task_return for r in rows if r.method == "im"]
        assert np.mean(im) > np.mean(nc)
