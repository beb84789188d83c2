"""Tests for configs, result files, reproducibility and the CLI."""

import copy
import json
from pathlib import Path

import pytest

from varsmooth.cli import main as cli_main
from varsmooth.exceptions import ConfigError
from varsmooth.harness import (
    ExperimentConfig,
    ResultRecord,
    gradcheck,
    load_config,
    metrics_cmd,
    payload_digest,
    run_cmd,
    simulate_cmd,
)

BASE_CONFIG = {
    "name": "growth-small",
    "model": {"id": "growth", "params": {}},
    "T": 6,
    "trials": 2,
    "seed": 321,
    "x0": [5.0],
    "estimators": [
        {"id": "vi_smoother", "options": {}},
        {"id": "urtss"},
        {"id": "grid_smoother"},
    ],
    "grid": {"lo": -40.0, "hi": 40.0, "n": 800},
    "solver": {"tol": 1e-10},
}


def write_config(tmp_path, cfg):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestConfigValidation:
    def test_valid_config_loads(self, tmp_path):
        cfg = load_config(write_config(tmp_path, BASE_CONFIG))
        assert cfg.T == 6 and cfg.trials == 2

    def test_unknown_top_level_key_rejected(self):
        bad = copy.deepcopy(BASE_CONFIG)
        bad["mystery"] = 1
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict(bad)

    def test_unknown_nested_key_rejected(self):
        bad = copy.deepcopy(BASE_CONFIG)
        bad["grid"]["resolution"] = 10
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict(bad)

    def test_unknown_estimator_rejected(self):
        bad = copy.deepcopy(BASE_CONFIG)
        bad["estimators"].append({"id": "psychic"})
        with pytest.raises(ConfigError, match="estimator"):
            ExperimentConfig.from_dict(bad)

    def test_missing_required_key_rejected(self):
        bad = copy.deepcopy(BASE_CONFIG)
        del bad["seed"]
        with pytest.raises(ConfigError, match="seed"):
            ExperimentConfig.from_dict(bad)


class TestResultRecord:
    def test_round_trip(self):
        rec = ResultRecord(
            trial=3, estimator="vi_filter", status="converged", step_offset=1,
            means=[[1.0, 2.0]], covs=[[1.0, 0.0, 0.0, 1.0]],
            metrics={"kl_vs_grid": [0.5]}, iterations=[7], objective=-1.25,
            wall_time_s=0.01,
        )
        back = ResultRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
        assert back.to_dict() == rec.to_dict()

    def test_digest_ignores_wall_time(self):
        rec = ResultRecord(
            trial=0, estimator="ukf", status="ok", step_offset=1,
            means=[[0.0]], covs=[[1.0]],
        )
        d1 = payload_digest(rec.to_dict())
        rec.wall_time_s = 123.0
        assert payload_digest(rec.to_dict()) == d1


def _strip_volatile(path: Path) -> list:
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        rec.pop("wall_time_s", None)
        out.append(rec)
    return out


class TestPipeline:
    def test_simulate_is_byte_identical(self, tmp_path):
        cfg = ExperimentConfig.from_dict(BASE_CONFIG)
        p1 = simulate_cmd(cfg, str(tmp_path / "a"))
        p2 = simulate_cmd(cfg, str(tmp_path / "b"))
        assert p1.read_bytes() == p2.read_bytes()

    def test_run_and_metrics(self, tmp_path):
        cfg = ExperimentConfig.from_dict(BASE_CONFIG)
        out = tmp_path / "out"
        paths = run_cmd(cfg, str(out))
        names = {p.name for p in paths}
        assert names == {"results_vi_smoother.jsonl", "results_urtss.jsonl", "results_grid_smoother.jsonl"}
        records = _strip_volatile(out / "results_vi_smoother.jsonl")
        assert len(records) == 2
        assert records[0]["status"] == "converged"
        assert "kl_vs_grid" in records[0]["metrics"]
        assert len(records[0]["metrics"]["kl_vs_grid"]) == 7  # steps 0..T
        csv_path = metrics_cmd(str(out))
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "metric,estimator,step,count,q1,median,q3"
        assert any(line.startswith("kl_vs_grid,vi_smoother,0,2,") for line in lines[1:])

    def test_rerun_identical_modulo_wall_time(self, tmp_path):
        cfg = ExperimentConfig.from_dict(BASE_CONFIG)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        run_cmd(cfg, str(out1))
        run_cmd(cfg, str(out2))
        for name in ("results_vi_smoother.jsonl", "results_urtss.jsonl"):
            assert _strip_volatile(out1 / name) == _strip_volatile(out2 / name)

    def test_worker_pool_matches_serial(self, tmp_path):
        serial = ExperimentConfig.from_dict(BASE_CONFIG)
        parallel_cfg = copy.deepcopy(BASE_CONFIG)
        parallel_cfg["workers"] = 2
        parallel = ExperimentConfig.from_dict(parallel_cfg)
        out1, out2 = tmp_path / "s", tmp_path / "p"
        run_cmd(serial, str(out1))
        run_cmd(parallel, str(out2))
        assert _strip_volatile(out1 / "results_vi_smoother.jsonl") == _strip_volatile(
            out2 / "results_vi_smoother.jsonl"
        )


class TestGradcheckCommand:
    def test_growth_report(self):
        rep = gradcheck("growth", T=3, seed=0)
        assert rep["max_rel_gradient_error"] <= 1e-6
        assert rep["max_rel_hessian_error"] <= 1e-5
        assert rep["cross_block_hessian_max"] == 0.0


class TestCli:
    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"name": "x"}))
        assert cli_main(["simulate", "--config", str(path)]) == 3

    def test_simulate_and_metrics_exit_codes(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, {**copy.deepcopy(BASE_CONFIG), "out_dir": str(tmp_path / "o")})
        assert cli_main(["simulate", "--config", cfg_path]) == 0
        assert (tmp_path / "o" / "datasets.jsonl").exists()

    def test_gradcheck_exit_code(self, tmp_path):
        assert cli_main(["gradcheck", "--model", "growth", "--T", "2", "--seed", "1"]) == 0

    def test_unknown_experiment_rejected(self):
        with pytest.raises(SystemExit):
            cli_main(["experiment", "--name", "nonsense"])
