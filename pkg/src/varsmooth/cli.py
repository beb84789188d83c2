"""Command-line front end.

Subcommands: ``simulate``, ``run``, ``metrics``, ``gradcheck``, ``experiment``.
Exit codes: 0 on success, 2 when an invariant or acceptance check failed,
3 on configuration errors.  The worker count can be set with the
``VARSMOOTH_WORKERS`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .exceptions import ConfigError, VarsmoothError
from .harness import (
    EXPERIMENT_NAMES,
    _jsonify,
    gradcheck,
    load_config,
    metrics_cmd,
    run_cmd,
    run_experiment,
    simulate_cmd,
)

# bulky per-step arrays and per-trial rows stay in the summary file, not stdout
_SUMMARY_SKIP_KEYS = {
    "rows",
    "median_kl_vi",
    "median_kl_urtss",
    "median_vi_pos_error",
    "median_prior_pos_error",
}

EXIT_OK = 0
EXIT_INVARIANT = 2
EXIT_CONFIG = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varsmooth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate datasets from a config")
    p_sim.add_argument("--config", required=True, help="path to a JSON config")
    p_sim.add_argument("--out", default=None, help="output directory")

    p_run = sub.add_parser("run", help="run configured estimators on datasets")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)

    p_met = sub.add_parser("metrics", help="aggregate stored metrics into CSV")
    p_met.add_argument("--out", required=True, help="directory holding results_*.jsonl")

    p_grad = sub.add_parser("gradcheck", help="verify derivatives against finite differences")
    p_grad.add_argument("--model", required=True, choices=["growth", "robot", "vmf", "illustrative"])
    p_grad.add_argument("--T", type=int, default=3)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--fd-step", type=float, default=1e-5)
    p_grad.add_argument("--out", default=None)

    p_exp = sub.add_parser("experiment", help="run a named study end to end")
    p_exp.add_argument("--name", required=True, choices=list(EXPERIMENT_NAMES))
    p_exp.add_argument("--scale", choices=["desk", "paper"], default="desk")
    p_exp.add_argument("--out", default=None)
    p_exp.add_argument("--seed", type=int, default=None)
    p_exp.add_argument("--trials", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    workers = int(os.environ.get("VARSMOOTH_WORKERS", "1"))
    try:
        if args.command == "simulate":
            path = simulate_cmd(load_config(args.config), args.out)
            print(f"wrote {path}")
            return EXIT_OK
        if args.command == "run":
            paths = run_cmd(load_config(args.config), args.out)
            for path in paths:
                print(f"wrote {path}")
            return EXIT_OK
        if args.command == "metrics":
            path = metrics_cmd(args.out)
            print(f"wrote {path}")
            return EXIT_OK
        if args.command == "gradcheck":
            report = gradcheck(args.model, args.T, args.seed, args.fd_step)
            print(json.dumps(report, indent=2, sort_keys=True))
            if args.out:
                os.makedirs(args.out, exist_ok=True)
                with open(os.path.join(args.out, f"gradcheck_{args.model}.json"), "w") as fh:
                    json.dump(report, fh, indent=2, sort_keys=True)
            ok = (
                report["max_rel_gradient_error"] <= 1e-6
                and report["max_rel_hessian_error"] <= 1e-5
                and report["cross_block_hessian_max"] == 0.0
            )
            return EXIT_OK if ok else EXIT_INVARIANT
        if args.command == "experiment":
            summary = run_experiment(
                args.name,
                scale=args.scale,
                out_dir=args.out,
                workers=workers,
                seed=args.seed,
                trials=args.trials,
            )
            printable = _jsonify({k: v for k, v in summary.items() if k not in _SUMMARY_SKIP_KEYS})
            print(json.dumps(printable, indent=2, sort_keys=True))
            return EXIT_OK if summary.get("passed", False) else EXIT_INVARIANT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VarsmoothError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
