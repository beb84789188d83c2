"""Experiment harness: dataset simulation, estimator runs, metrics, experiments.

File formats (chosen for diffability and cross-language parsing):

* configs: JSON, schema-validated, unknown keys rejected;
* datasets and per-step results: JSON lines, one record per trial;
* metric summaries: CSV with the header ``metric,estimator,step,count,q1,median,q3``.

Reruns with identical configs and seeds produce byte-identical files except
for wall-time fields, which live outside the hashed payload
(:func:`payload_digest`).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import baselines, estimators, metrics
from .exceptions import ConfigError, VarsmoothError
from .models import (
    Dataset,
    GaussianPrior,
    make_growth_model,
    make_illustrative_model,
    make_linear_model,
    make_robot_model,
    make_vmf_tracking_model,
    simulate,
)
from .nlp_solver import SolveOptions
from .vi_core import BlockChain, GaussianMarginal, elbo, elbo_gradient, elbo_hessian, random_feasible_chain

__all__ = [
    "ExperimentConfig",
    "ResultRecord",
    "load_config",
    "simulate_cmd",
    "run_cmd",
    "metrics_cmd",
    "gradcheck",
    "run_experiment",
    "EXPERIMENT_NAMES",
    "payload_digest",
]

VOLATILE_KEYS = ("wall_time_s",)

_SOLVER_SCHEMA = {
    "tol": float,
    "max_iter": int,
    "trust_init": float,
    "penalty_init": float,
    "soc": bool,
}

_ESTIMATOR_IDS = (
    "vi_filter",
    "vi_smoother",
    "kalman_filter",
    "rts_smoother",
    "ukf",
    "urtss",
    "bpf",
    "grid_filter",
    "grid_smoother",
)

_CONFIG_SCHEMA = {
    "name": str,
    "model": dict,
    "T": int,
    "trials": int,
    "seed": int,
    "x0": list,
    "estimators": list,
    "grid": dict,
    "solver": dict,
    "particles": int,
    "workers": int,
    "out_dir": str,
}

_REQUIRED_KEYS = ("name", "model", "T", "trials", "seed", "estimators")


def _check_keys(obj: dict, schema: dict, where: str, required: Sequence[str] = ()) -> None:
    unknown = set(obj) - set(schema)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    for key in required:
        if key not in obj:
            raise ConfigError(f"{where}: missing required key {key!r}")
    for key, value in obj.items():
        expected = schema[key]
        if expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}: key {key!r} must be a number")
        elif not isinstance(value, expected):
            raise ConfigError(f"{where}: key {key!r} must be of type {expected.__name__}")


@dataclass
class ExperimentConfig:
    """Validated run configuration; see the module docstring for the format."""

    name: str
    model: dict
    T: int
    trials: int
    seed: int
    estimators: List[dict]
    x0: Optional[list] = None
    grid: Optional[dict] = None
    solver: dict = field(default_factory=dict)
    particles: int = 100_000
    workers: int = 1
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _check_keys(raw, _CONFIG_SCHEMA, "config", _REQUIRED_KEYS)
        _check_keys(raw["model"], {"id": str, "params": dict}, "config.model", ("id",))
        for i, est in enumerate(raw["estimators"]):
            _check_keys(est, {"id": str, "options": dict}, f"config.estimators[{i}]", ("id",))
            if est["id"] not in _ESTIMATOR_IDS:
                raise ConfigError(f"unknown estimator id {est['id']!r}")
        if "grid" in raw:
            _check_keys(raw["grid"], {"lo": float, "hi": float, "n": int}, "config.grid")
        if "solver" in raw:
            _check_keys(raw["solver"], _SOLVER_SCHEMA, "config.solver")
        if raw["T"] < 1 or raw["trials"] < 1:
            raise ConfigError("T and trials must be positive")
        return cls(**raw)

    def solve_options(self) -> SolveOptions:
        return SolveOptions(**self.solver)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


@dataclass
class ResultRecord:
    """One estimator's output on one trial, flattened for JSON-lines storage."""

    trial: int
    estimator: str
    status: str
    step_offset: int  # first step index covered by means/covs (0 for smoothers)
    means: List[List[float]]
    covs: List[List[float]]  # per step, row-major flattened covariance
    metrics: Dict[str, List[float]] = field(default_factory=dict)
    iterations: Optional[List[int]] = None
    objective: Optional[float] = None
    wall_time_s: float = 0.0
    schema: int = 1

    def to_dict(self) -> dict:
        return _jsonify(
            {
                "schema": self.schema,
                "trial": self.trial,
                "estimator": self.estimator,
                "status": self.status,
                "step_offset": self.step_offset,
                "means": self.means,
                "covs": self.covs,
                "metrics": self.metrics,
                "iterations": self.iterations,
                "objective": self.objective,
                "wall_time_s": self.wall_time_s,
            }
        )

    @classmethod
    def from_dict(cls, raw: dict) -> "ResultRecord":
        return cls(**{k: raw[k] for k in raw})


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def payload_digest(record: dict) -> str:
    """Stable digest of a record with volatile (timing) fields excluded."""
    trimmed = {k: v for k, v in record.items() if k not in VOLATILE_KEYS}
    return hashlib.sha256(json.dumps(trimmed, sort_keys=True).encode()).hexdigest()


def _write_jsonl(path: Path, records: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonify(rec), sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> List[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonify(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Model registry
# ---------------------------------------------------------------------------


def build_model(model_cfg: dict, T: int):
    """Instantiate a model from its config id and parameter dict."""
    params = dict(model_cfg.get("params", {}))
    model_id = model_cfg["id"]
    if model_id == "growth":
        return make_growth_model()
    if model_id == "illustrative":
        return make_illustrative_model()
    if model_id == "robot":
        return make_robot_model(T=T, **params)
    if model_id == "vmf":
        return make_vmf_tracking_model(**params)
    if model_id == "linear":
        prior = GaussianPrior.from_cov(np.asarray(params["prior_mean"]), np.asarray(params["prior_cov"]))
        return make_linear_model(
            A=np.asarray(params["A"]),
            C=np.asarray(params["C"]),
            Q=np.asarray(params["Q"]),
            R=np.asarray(params["R"]),
            prior=prior,
        )
    raise ConfigError(f"unknown model id {model_id!r}")


# ---------------------------------------------------------------------------
# simulate / run / metrics commands
# ---------------------------------------------------------------------------


def simulate_cmd(config: ExperimentConfig, out_dir: Optional[str] = None) -> Path:
    """Simulate ``trials`` datasets and write them as JSON lines."""
    out = Path(out_dir or config.out_dir)
    model = build_model(config.model, config.T)
    records = []
    for trial in range(config.trials):
        seed = config.seed + trial
        data = simulate(model, config.T, seed, x0=config.x0)
        records.append(
            {"trial": trial, "seed": seed, "T": config.T, "ys": data.ys, "xs": data.xs}
        )
    path = out / "datasets.jsonl"
    _write_jsonl(path, records)
    return path


def _dataset_from_record(rec: dict) -> Dataset:
    xs = np.asarray(rec["xs"]) if rec.get("xs") is not None else None
    return Dataset(T=rec["T"], ys=np.asarray(rec["ys"]), xs=xs, seed=rec["seed"])


def _run_one_estimator(model, data: Dataset, est_cfg: dict, config: ExperimentConfig, trial: int) -> ResultRecord:
    est_id = est_cfg["id"]
    options = dict(est_cfg.get("options", {}))
    t0 = time.perf_counter()
    solver_opts = config.solve_options()
    grid_cfg = config.grid or {"lo": -40.0, "hi": 40.0, "n": 4000}

    if est_id == "vi_filter":
        res = estimators.vi_filter(model, data, options=solver_opts)
        status = "converged" if res.all_converged else "partial"
        rec = ResultRecord(
            trial=trial, estimator=est_id, status=status, step_offset=1,
            means=[m.mean for m in res.marginals],
            covs=[m.cov.reshape(-1) for m in res.marginals],
            iterations=[int(i) for i in res.iterations],
            objective=float(np.sum(res.step_objectives)),
        )
    elif est_id == "vi_smoother":
        init = options.pop("init", "filter")
        if init == "measurements":
            chain0 = estimators.init_smoother_from_measurements(
                data, n_x=model.n_x,
                state_indices=options.pop("state_indices"),
                cov_scale=options.pop("cov_scale", 0.01),
            )
            res = estimators.vi_smooth(model, data, init=chain0, options=solver_opts)
        else:
            res = estimators.vi_smooth(model, data, init=init, options=solver_opts)
        margs = res.marginals
        rec = ResultRecord(
            trial=trial, estimator=est_id, status=res.report.status, step_offset=0,
            means=[m.mean for m in margs],
            covs=[m.cov.reshape(-1) for m in margs],
            iterations=[res.report.iterations],
            objective=res.report.objective,
        )
    elif est_id == "kalman_filter":
        res = baselines.kalman_filter(model, data)
        rec = ResultRecord(
            trial=trial, estimator=est_id, status="ok", step_offset=1,
            means=list(res.means), covs=[c.reshape(-1) for c in res.covs],
            objective=res.loglik,
        )
    elif est_id == "rts_smoother":
        res = baselines.rts_smooth(model, data)
        rec = ResultRecord(
            trial=trial, estimator=est_id, status="ok", step_offset=0,
            means=list(res.means), covs=[c.reshape(-1) for c in res.covs],
        )
    elif est_id == "ukf":
        res = baselines.ukf_filter(model, data)
        rec = ResultRecord(
            trial=trial, estimator=est_id, status="ok", step_offset=1,
            means=list(res.means), covs=[c.reshape(-1) for c in res.covs],
            objective=res.loglik,
        )
    elif est_id == "urtss":
        res = baselines.urtss_smooth(model, data)
        rec = ResultRecord(
            trial=trial, estimator=est_id, status="ok", step_offset=0,
            means=list(res.means), covs=[c.reshape(-1) for c in res.covs],
        )
    elif est_id == "bpf":
        n_particles = int(options.pop("particles", config.particles))
        res = baselines.bootstrap_pf(model, data, n_particles, seed=config.seed + 7919 * (trial + 1))
        rec = ResultRecord(
            trial=trial, estimator=est_id, status="ok", step_offset=1,
            means=list(res.means), covs=[c.reshape(-1) for c in res.covs],
            objective=res.loglik,
        )
    elif est_id == "grid_filter":
        res = baselines.grid_filter(model, data, **grid_cfg)
        rec = ResultRecord(
            trial=trial, estimator=est_id, status="ok", step_offset=1,
            means=[[g.mean()] for g in res.filtered],
            covs=[[g.var()] for g in res.filtered],
            objective=res.loglik,
        )
    elif est_id == "grid_smoother":
        res = baselines.grid_smooth(model, data, **grid_cfg)
        rec = ResultRecord(
            trial=trial, estimator=est_id, status="ok", step_offset=0,
            means=[[g.mean()] for g in res.smoothed],
            covs=[[g.var()] for g in res.smoothed],
            objective=res.loglik,
        )
    else:
        raise ConfigError(f"unknown estimator id {est_id!r}")
    rec.wall_time_s = time.perf_counter() - t0
    return rec


def _grid_divergences(model, data: Dataset, config: ExperimentConfig, records: List[ResultRecord]) -> None:
    """Attach per-step KL/SKL/JS to Gaussian records when a grid reference ran."""
    grid_cfg = config.grid or {"lo": -40.0, "hi": 40.0, "n": 4000}
    by_id = {r.estimator: r for r in records}
    refs = {}
    if "grid_smoother" in by_id:
        refs["smooth"] = baselines.grid_smooth(model, data, **grid_cfg).smoothed
    if "grid_filter" in by_id:
        refs["filter"] = baselines.grid_filter(model, data, **grid_cfg).filtered
    for rec in records:
        kind = None
        if rec.estimator in ("vi_smoother", "rts_smoother", "urtss") and "smooth" in refs:
            kind = "smooth"
            ref = refs["smooth"]
        elif rec.estimator in ("vi_filter", "kalman_filter", "ukf") and "filter" in refs:
            kind = "filter"
            ref = refs["filter"]
        if kind is None:
            continue
        kls, skls, jss = [], [], []
        for step_idx, (mean, cov) in enumerate(zip(rec.means, rec.covs)):
            marg = GaussianMarginal(np.asarray(mean), np.asarray(cov).reshape(model.n_x, model.n_x))
            dens = ref[step_idx]
            kls.append(metrics.kl_grid_gaussian(dens, marg))
            skls.append(metrics.skl(dens, marg))
            jss.append(metrics.js(dens, marg))
        rec.metrics["kl_vs_grid"] = kls
        rec.metrics["skl_vs_grid"] = skls
        rec.metrics["js_vs_grid"] = jss


def _run_trial(payload: dict) -> List[dict]:
    """Worker entry point: run all estimators of one trial; returns record dicts."""
    config = ExperimentConfig.from_dict(payload["config"])
    data = _dataset_from_record(payload["dataset"])
    model = build_model(config.model, config.T)
    records = [
        _run_one_estimator(model, data, est_cfg, config, payload["trial"])
        for est_cfg in config.estimators
    ]
    if model.n_x == 1:
        _grid_divergences(model, data, config, records)
    return [r.to_dict() for r in records]


def _worker_count(config: ExperimentConfig) -> int:
    env = os.environ.get("VARSMOOTH_WORKERS")
    return int(env) if env else config.workers


def run_cmd(config: ExperimentConfig, out_dir: Optional[str] = None) -> List[Path]:
    """Run every configured estimator on every dataset trial."""
    out = Path(out_dir or config.out_dir)
    dataset_path = out / "datasets.jsonl"
    if not dataset_path.exists():
        simulate_cmd(config, out_dir)
    dataset_records = _read_jsonl(dataset_path)
    payloads = [
        {"config": _config_as_dict(config), "dataset": rec, "trial": rec["trial"]}
        for rec in dataset_records
    ]
    workers = _worker_count(config)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_trial = list(pool.map(_run_trial, payloads))
    else:
        per_trial = [_run_trial(p) for p in payloads]
    paths = []
    by_estimator: Dict[str, List[dict]] = {}
    for trial_records in per_trial:
        for rec in trial_records:
            by_estimator.setdefault(rec["estimator"], []).append(rec)
    for est_id, recs in by_estimator.items():
        path = out / f"results_{est_id}.jsonl"
        _write_jsonl(path, sorted(recs, key=lambda r: r["trial"]))
        paths.append(path)
    return paths


def _config_as_dict(config: ExperimentConfig) -> dict:
    out = {
        "name": config.name,
        "model": config.model,
        "T": config.T,
        "trials": config.trials,
        "seed": config.seed,
        "estimators": config.estimators,
        "solver": config.solver,
        "particles": config.particles,
        "workers": config.workers,
        "out_dir": config.out_dir,
    }
    if config.x0 is not None:
        out["x0"] = config.x0
    if config.grid is not None:
        out["grid"] = config.grid
    return _jsonify(out)


def _quartiles(values: np.ndarray) -> tuple:
    return (
        float(np.percentile(values, 25)),
        float(np.percentile(values, 50)),
        float(np.percentile(values, 75)),
    )


def metrics_cmd(out_dir: str) -> Path:
    """Aggregate stored per-step metrics into box-plot statistics (CSV)."""
    out = Path(out_dir)
    rows = []
    for path in sorted(out.glob("results_*.jsonl")):
        records = _read_jsonl(path)
        if not records:
            continue
        est_id = records[0]["estimator"]
        metric_names = sorted({name for rec in records for name in rec.get("metrics", {})})
        for name in metric_names:
            series = [rec["metrics"][name] for rec in records if name in rec.get("metrics", {})]
            length = min(len(s) for s in series)
            arr = np.asarray([s[:length] for s in series])
            offset = records[0].get("step_offset", 0)
            for step in range(length):
                q1, med, q3 = _quartiles(arr[:, step])
                rows.append([name, est_id, step + offset, arr.shape[0], q1, med, q3])
    path = out / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "estimator", "step", "count", "q1", "median", "q3"])
        writer.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# Derivative check
# ---------------------------------------------------------------------------


def gradcheck(model_id: str, T: int, seed: int = 0, fd_step: float = 1e-5) -> dict:
    """Max relative gradient/Hessian error against central finite differences."""
    model = build_model({"id": model_id, "params": {}}, T)
    data = simulate(model, T, seed)
    rng = np.random.default_rng(seed + 1)
    chain = random_feasible_chain(rng, model.n_x, T, mean_scale=1.0)
    if model_id == "vmf":
        # keep sigma points inside the region where bearings are well defined
        shift = np.array([-90.0, 6.0, 5.0, 4.0])
        chain = BlockChain(
            [
                type(b)(mu=shift + 0.5 * b.mu, mu_bar=shift + 0.5 * b.mu_bar, A=b.A, B=b.B, C=b.C)
                for b in chain.blocks
            ]
        )
    if model_id == "robot":
        chain = BlockChain(
            [type(b)(mu=0.3 * b.mu, mu_bar=0.3 * b.mu_bar, A=b.A, B=b.B, C=b.C) for b in chain.blocks]
        )
    x0 = chain.pack()
    n = x0.size

    def f(vec):
        return elbo(model, data, BlockChain.unpack(vec, model.n_x, T))

    grad = elbo_gradient(model, data, chain)
    fd_grad = np.empty(n)
    for i in range(n):
        step = np.zeros(n)
        step[i] = fd_step
        fd_grad[i] = (f(x0 + step) - f(x0 - step)) / (2 * fd_step)
    gscale = max(1.0, float(np.max(np.abs(fd_grad))))
    grad_err = float(np.max(np.abs(grad - fd_grad))) / gscale

    hess = elbo_hessian(model, data, chain)
    dense = hess.to_dense()
    fd_hess = np.empty((n, n))
    for i in range(n):
        step = np.zeros(n)
        step[i] = fd_step
        gp = elbo_gradient(model, data, BlockChain.unpack(x0 + step, model.n_x, T))
        gm = elbo_gradient(model, data, BlockChain.unpack(x0 - step, model.n_x, T))
        fd_hess[i] = (gp - gm) / (2 * fd_step)
    fd_hess = 0.5 * (fd_hess + fd_hess.T)
    hscale = max(1.0, float(np.max(np.abs(fd_hess))))
    hess_err = float(np.max(np.abs(dense - fd_hess))) / hscale

    nb = chain.layout.block_size
    cross_max = 0.0
    for i in range(T):
        for j in range(T):
            if i != j:
                blockij = dense[i * nb : (i + 1) * nb, j * nb : (j + 1) * nb]
                cross_max = max(cross_max, float(np.max(np.abs(blockij))) if blockij.size else 0.0)
    return {
        "model": model_id,
        "T": T,
        "seed": seed,
        "fd_step": fd_step,
        "max_rel_gradient_error": grad_err,
        "max_rel_hessian_error": hess_err,
        "cross_block_hessian_max": cross_max,
        "n_params": int(n),
    }


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

EXPERIMENT_NAMES = (
    "linear-equivalence",
    "illustrative",
    "growth",
    "robot-filter",
    "robot-smooth",
    "vmf",
)


def _random_linear_system(rng: np.random.Generator, n_x: int):
    a = rng.normal(size=(n_x, n_x))
    a *= rng.uniform(0.5, 0.9) / max(1.0, float(np.max(np.abs(np.linalg.eigvals(a)))))
    c = rng.normal(size=(1, n_x))
    q_half = 0.4 * rng.normal(size=(n_x, n_x))
    r = np.eye(1) * rng.uniform(0.3, 1.0)
    return make_linear_model(
        A=a, C=c, Q=q_half @ q_half.T + 0.3 * np.eye(n_x), R=r,
        prior=GaussianPrior.from_cov(rng.normal(size=n_x), np.eye(n_x)),
    )


def experiment_linear_equivalence(trials: int = 20, T: int = 20, seed: int = 2024) -> dict:
    """Random linear systems: the variational answers must match Kalman/RTS."""
    rng = np.random.default_rng(seed)
    worst = {"filter_mean": 0.0, "filter_cov": 0.0, "smoother_mean": 0.0, "smoother_cov": 0.0, "evidence": 0.0}
    rows = []
    for trial in range(trials):
        n_x = 1 + trial % 3
        model = _random_linear_system(rng, n_x)
        data = simulate(model, T, seed=seed + 1000 + trial)
        kf = baselines.kalman_filter(model, data)
        sm = baselines.rts_smooth(model, data, kf)
        filt = estimators.vi_filter(model, data)
        smooth = estimators.vi_smooth(model, data)
        dev_fm = max(
            float(np.max(np.abs(m.mean - kf.means[k]))) for k, m in enumerate(filt.marginals)
        )
        dev_fc = max(
            float(np.linalg.norm(m.cov - kf.covs[k])) for k, m in enumerate(filt.marginals)
        )
        margs = smooth.marginals
        dev_sm = max(float(np.max(np.abs(margs[k].mean - sm.means[k]))) for k in range(T + 1))
        dev_sc = max(float(np.linalg.norm(margs[k].cov - sm.covs[k])) for k in range(T + 1))
        dev_ev = abs(smooth.report.objective - kf.loglik)
        worst["filter_mean"] = max(worst["filter_mean"], dev_fm)
        worst["filter_cov"] = max(worst["filter_cov"], dev_fc)
        worst["smoother_mean"] = max(worst["smoother_mean"], dev_sm)
        worst["smoother_cov"] = max(worst["smoother_cov"], dev_sc)
        worst["evidence"] = max(worst["evidence"], dev_ev)
        rows.append(
            {
                "trial": trial,
                "n_x": n_x,
                "filter_converged": filt.all_converged,
                "smoother_converged": smooth.report.converged,
                "max_dev": max(dev_fm, dev_fc, dev_sm, dev_sc, dev_ev),
            }
        )
    max_dev = max(worst.values())
    return {
        "experiment": "linear-equivalence",
        "trials": trials,
        "T": T,
        "worst_deviations": worst,
        "max_deviation": max_dev,
        "all_converged": all(r["filter_converged"] and r["smoother_converged"] for r in rows),
        "passed": bool(max_dev <= 1e-6 and all(r["smoother_converged"] for r in rows)),
        "rows": rows,
    }


def experiment_illustrative() -> dict:
    """One severe correction step: variational update vs. one linear update."""
    model = make_illustrative_model()
    data = Dataset(T=1, ys=np.array([[15.0]]))
    grid = baselines.grid_filter(model, data, lo=-10.0, hi=25.0, n=4001)
    truth = grid.filtered[0]
    prior = GaussianMarginal(model.prior.mean, model.prior.cov)
    step = estimators.vi_filter_step(model, prior, data.ys[0], k=1)
    ukf = baselines.ukf_filter(model, data)
    kl_vi = metrics.kl_grid_gaussian(truth, step.marginal)
    kl_ukf = metrics.kl_grid_gaussian(truth, GaussianMarginal(ukf.means[0], ukf.covs[0]))
    mean_rel_err = abs(step.marginal.mean[0] - truth.mean()) / abs(truth.mean())
    return {
        "experiment": "illustrative",
        "grid_mean": truth.mean(),
        "grid_var": truth.var(),
        "grid_logz": grid.loglik,
        "vi_mean": float(step.marginal.mean[0]),
        "vi_var": float(step.marginal.cov[0, 0]),
        "vi_converged": step.report.converged,
        "vi_iterations": step.report.iterations,
        "elbo": step.report.objective,
        "ukf_mean": float(ukf.means[0, 0]),
        "kl_vi": kl_vi,
        "kl_ukf": kl_ukf,
        "mean_rel_err": mean_rel_err,
        "passed": bool(kl_vi < kl_ukf and mean_rel_err < 0.02 and step.report.converged),
    }


def _growth_trial(payload: dict) -> dict:
    seed = payload["seed"]
    grid_cfg = payload["grid"]
    model = make_growth_model()
    data = simulate(model, payload["T"], seed, x0=[5.0])
    truth = baselines.grid_smooth(model, data, **grid_cfg)
    # best-of-two initialization: the filtering pass can commit to the wrong
    # sign mode of the squared measurement; the unscented warm start escapes it
    smooth = estimators.vi_smooth(model, data, init="auto")
    urtss = baselines.urtss_smooth(model, data)
    kl_vi = [
        metrics.kl_grid_gaussian(truth.smoothed[k], m)
        for k, m in enumerate(smooth.marginals)
    ]
    kl_urtss = [
        metrics.kl_grid_gaussian(
            truth.smoothed[k], GaussianMarginal(urtss.means[k], urtss.covs[k])
        )
        for k in range(payload["T"] + 1)
    ]
    return {
        "seed": seed,
        "kl_vi": kl_vi,
        "kl_urtss": kl_urtss,
        "status": smooth.report.status,
        "iterations": smooth.report.iterations,
        "cons_residual": smooth.report.cons_residual,
        "elbo": smooth.report.objective,
        "grid_logz": truth.loglik,
    }


def experiment_growth(trials: int = 20, T: int = 50, seed: int = 1234, workers: int = 1) -> dict:
    """Scalar benchmark: per-step divergence of the smoother vs. the URTSS."""
    grid_cfg = {"lo": -40.0, "hi": 40.0, "n": 4000}
    payloads = [{"seed": seed + t, "T": T, "grid": grid_cfg} for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_growth_trial, payloads))
    else:
        rows = [_growth_trial(p) for p in payloads]
    kl_vi = np.asarray([r["kl_vi"] for r in rows])
    kl_urtss = np.asarray([r["kl_urtss"] for r in rows])
    med_vi = np.median(kl_vi, axis=0)
    med_urtss = np.median(kl_urtss, axis=0)
    steps_won = int(np.sum(med_vi[1:] <= med_urtss[1:]))  # steps 1..T
    converged = [r["status"] == "converged" and r["cons_residual"] <= 1e-8 for r in rows]
    iters = [r["iterations"] for r in rows]
    bound_gaps = [r["grid_logz"] - r["elbo"] for r in rows]
    return {
        "experiment": "growth",
        "trials": trials,
        "T": T,
        "median_kl_vi": med_vi,
        "median_kl_urtss": med_urtss,
        "steps_vi_not_worse": steps_won,
        "convergence_rate": float(np.mean(converged)),
        "median_iterations": float(np.median(iters)),
        "max_iterations": int(np.max(iters)),
        "min_bound_gap": float(np.min(bound_gaps)),
        "passed": bool(steps_won >= int(0.9 * T) and np.mean(converged) >= 0.95),
        "rows": [
            {k: v for k, v in r.items() if k not in ("kl_vi", "kl_urtss")} for r in rows
        ],
    }


def _mismatched_robot(T: int, rng: np.random.Generator):
    return make_robot_model(
        T=T,
        m=float(rng.uniform(15.0, 20.0)),
        J=float(rng.uniform(0.01, 1.0)),
        l=float(rng.uniform(0.01, 0.5)),
        Q=np.diag([0.01**2, 0.01**2, 0.0035**2, 0.01**2, 0.01**2]),
    )


def _robot_filter_trial(payload: dict) -> dict:
    rng = np.random.default_rng(payload["seed"])
    data = Dataset(T=payload["T"], ys=np.asarray(payload["ys"]))
    wrong = _mismatched_robot(payload["T"], rng)
    out = {"seed": payload["seed"]}
    try:
        filt = estimators.vi_filter(wrong, data, options=SolveOptions(max_iter=200))
        out["vi_diverged"] = estimators.is_diverged(filt.marginals, filt.reports)
        out["vi_mean_iterations"] = float(np.mean(filt.iterations))
        out["vi_heading"] = [float(m.mean[2]) for m in filt.marginals]
    except VarsmoothError:
        out["vi_diverged"] = True
        out["vi_mean_iterations"] = float("nan")
    try:
        ukf = baselines.ukf_filter(wrong, data)
        margs = [GaussianMarginal(m, c) for m, c in zip(ukf.means, ukf.covs)]
        out["ukf_diverged"] = estimators.is_diverged(margs)
    except (VarsmoothError, np.linalg.LinAlgError):
        out["ukf_diverged"] = True
    return out


def experiment_robot_filter(trials: int = 10, T: int = 200, seed: int = 77, workers: int = 1) -> dict:
    """Sensitivity of filtering to mismatched dynamics parameters."""
    truth = make_robot_model(T=T)
    data = simulate(truth, T, seed=seed)
    payloads = [
        {"seed": seed + 100 + t, "T": T, "ys": data.ys} for t in range(trials)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_robot_filter_trial, payloads))
    else:
        rows = [_robot_filter_trial(p) for p in payloads]
    vi_div = float(np.mean([r["vi_diverged"] for r in rows]))
    ukf_div = float(np.mean([r["ukf_diverged"] for r in rows]))
    return {
        "experiment": "robot-filter",
        "trials": trials,
        "T": T,
        "vi_diverged_fraction": vi_div,
        "ukf_diverged_fraction": ukf_div,
        "passed": bool(vi_div <= ukf_div),
        "rows": [{k: v for k, v in r.items() if k != "vi_heading"} for r in rows],
    }


def _robot_smooth_trial(payload: dict) -> dict:
    rng = np.random.default_rng(payload["seed"])
    data = Dataset(T=payload["T"], ys=np.asarray(payload["ys"]), xs=np.asarray(payload["xs"]))
    wrong = _mismatched_robot(payload["T"], rng)
    chain0 = estimators.init_smoother_from_measurements(
        data, n_x=5, state_indices=[0, 1, 2], cov_scale=0.01
    )
    res = estimators.vi_smooth(wrong, data, init=chain0, options=SolveOptions(max_iter=500))
    means = np.asarray([m.mean for m in res.marginals])
    true_pos = data.xs[:, :2]
    rmse_smooth = float(np.sqrt(np.mean(np.sum((means[:, :2] - true_pos) ** 2, axis=1))))
    rmse_meas = float(np.sqrt(np.mean(np.sum((data.ys[:, :2] - true_pos[1:]) ** 2, axis=1))))
    return {
        "seed": payload["seed"],
        "status": res.report.status,
        "iterations": res.report.iterations,
        "cons_residual": res.report.cons_residual,
        "rmse_smoothed_position": rmse_smooth,
        "rmse_measured_position": rmse_meas,
    }


def experiment_robot_smooth(trials: int = 10, T: int = 200, seed: int = 99, workers: int = 1) -> dict:
    """Measurement-initialized smoothing under mismatched dynamics."""
    truth = make_robot_model(T=T)
    data = simulate(truth, T, seed=seed)
    payloads = [
        {"seed": seed + 500 + t, "T": T, "ys": data.ys, "xs": data.xs} for t in range(trials)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_robot_smooth_trial, payloads))
    else:
        rows = [_robot_smooth_trial(p) for p in payloads]
    converged = [r["status"] == "converged" for r in rows]
    improved = [
        r["rmse_smoothed_position"] <= r["rmse_measured_position"]
        for r in rows
        if r["status"] == "converged"
    ]
    return {
        "experiment": "robot-smooth",
        "trials": trials,
        "T": T,
        "converged_count": int(np.sum(converged)),
        "median_iterations": float(np.median([r["iterations"] for r in rows])),
        "all_converged_improve_on_measurements": bool(all(improved)) if improved else False,
        "passed": bool(np.sum(converged) >= int(0.9 * trials) and all(improved)),
        "rows": rows,
    }


def _vmf_trial(payload: dict) -> dict:
    model = make_vmf_tracking_model()
    data = Dataset(T=payload["T"], ys=np.asarray(payload["ys"]))
    filt = estimators.vi_filter(model, data, options=SolveOptions(max_iter=200))
    pf = baselines.bootstrap_pf(model, data, payload["particles"], seed=payload["pf_seed"])
    vi_means = np.asarray([m.mean for m in filt.marginals])
    pred_means = np.empty((payload["T"], 4))
    mean = model.prior.mean.copy()
    for k in range(payload["T"]):
        mean = model.A @ mean
        pred_means[k] = mean
    pos_idx = [0, 2]
    return {
        "seed": payload["seed"],
        "all_converged": filt.all_converged,
        "iterations": [int(i) for i in filt.iterations],
        "vi_pos_error": metrics.position_error(vi_means, pf.means, pos_idx),
        "prior_pos_error": metrics.position_error(pred_means, pf.means, pos_idx),
        "elbo_sum": float(np.sum(filt.step_objectives)),
        "pf_loglik": pf.loglik,
    }


def experiment_vmf(
    trials: int = 10,
    T: int = 100,
    seed: int = 4242,
    particles: int = 100_000,
    ll_seeds: int = 5,
    workers: int = 1,
) -> dict:
    """Bearing-only tracking with circular noise: filter vs. particle reference."""
    model = make_vmf_tracking_model()
    payloads = []
    for t in range(trials):
        data = simulate(model, T, seed=seed + t)
        payloads.append(
            {
                "seed": seed + t,
                "T": T,
                "ys": data.ys,
                "particles": particles,
                "pf_seed": seed + 9000 + t,
            }
        )
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_vmf_trial, payloads))
    else:
        rows = [_vmf_trial(p) for p in payloads]
    vi_err = np.asarray([r["vi_pos_error"] for r in rows])
    prior_err = np.asarray([r["prior_pos_error"] for r in rows])
    med_vi = np.median(vi_err, axis=0)
    med_prior = np.median(prior_err, axis=0)
    iters = np.asarray([r["iterations"] for r in rows])
    # evidence-bound tightness on the first dataset across particle-filter seeds
    first = payloads[0]
    data0 = Dataset(T=T, ys=np.asarray(first["ys"]))
    pf_logliks = [
        baselines.bootstrap_pf(model, data0, particles, seed=seed + 33 * (i + 1)).loglik
        for i in range(ll_seeds)
    ]
    elbo_sum = rows[0]["elbo_sum"]
    pf_mean = float(np.mean(pf_logliks))
    pf_stderr = float(np.std(pf_logliks, ddof=1) / np.sqrt(ll_seeds))
    return {
        "experiment": "vmf",
        "trials": trials,
        "T": T,
        "particles": particles,
        "all_steps_converged": bool(all(r["all_converged"] for r in rows)),
        "median_step_iterations": float(np.median(iters)),
        "median_vi_pos_error": med_vi,
        "median_prior_pos_error": med_prior,
        "vi_beats_prior_everywhere": bool(np.all(med_vi < med_prior)),
        "elbo_sum_first_dataset": elbo_sum,
        "pf_loglik_mean": pf_mean,
        "pf_loglik_stderr": pf_stderr,
        "bound_respected": bool(elbo_sum <= pf_mean + 3.0 * pf_stderr),
        "passed": bool(
            all(r["all_converged"] for r in rows)
            and np.median(iters) <= 10
            and np.all(med_vi < med_prior)
            and elbo_sum <= pf_mean + 3.0 * pf_stderr
        ),
        "rows": [
            {k: v for k, v in r.items() if k not in ("vi_pos_error", "prior_pos_error")}
            for r in rows
        ],
    }


_DESK_DEFAULTS = {
    "linear-equivalence": {"trials": 20, "T": 20, "seed": 2024},
    "illustrative": {},
    "growth": {"trials": 20, "T": 50, "seed": 1234},
    "robot-filter": {"trials": 10, "T": 200, "seed": 77},
    "robot-smooth": {"trials": 10, "T": 200, "seed": 99},
    "vmf": {"trials": 10, "T": 100, "seed": 4242, "particles": 100_000},
}

_PAPER_OVERRIDES = {
    "growth": {"trials": 100},
    "robot-filter": {"trials": 500, "T": 500},
    "robot-smooth": {"trials": 200, "T": 500},
    "vmf": {"trials": 500, "particles": 500_000},
}


def run_experiment(
    name: str,
    scale: str = "desk",
    out_dir: Optional[str] = None,
    workers: int = 1,
    **overrides,
) -> dict:
    """Run a named study at desk or paper scale and persist its summary."""
    if name not in EXPERIMENT_NAMES:
        raise ConfigError(f"unknown experiment {name!r}; choose from {EXPERIMENT_NAMES}")
    if scale not in ("desk", "paper"):
        raise ConfigError("scale must be 'desk' or 'paper'")
    kwargs = dict(_DESK_DEFAULTS[name])
    if scale == "paper":
        kwargs.update(_PAPER_OVERRIDES.get(name, {}))
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    runners: Dict[str, Callable[..., dict]] = {
        "linear-equivalence": experiment_linear_equivalence,
        "illustrative": experiment_illustrative,
        "growth": experiment_growth,
        "robot-filter": experiment_robot_filter,
        "robot-smooth": experiment_robot_smooth,
        "vmf": experiment_vmf,
    }
    if name != "illustrative" and name != "linear-equivalence":
        kwargs["workers"] = workers
    summary = runners[name](**kwargs)
    summary["scale"] = scale
    if out_dir is not None:
        _write_json(Path(out_dir) / f"summary_{name}.json", summary)
    return summary
