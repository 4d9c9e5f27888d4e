"""``perfinf`` command line: simulate, coverage, qq, score-eval, convergence.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from perfinf.errors import ConfigError, NumericalError
from perfinf.harness import experiments as ex
from perfinf.harness.config import ExperimentConfig, load_config, default_config
from perfinf.harness.io import dumps_csv, dumps_json, write_atomic
from perfinf.inference import ScoreConfig

log = logging.getLogger("perfinf")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perfinf", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON (default: built-in setting)")
    common.add_argument("--seed", type=int, help="override the base seed")
    common.add_argument("--trials", type=int, help="override the number of Monte Carlo trials")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--oracle-gradg", action="store_true", help="use the analytic Jacobian of G")
    common.add_argument("--fitted-gradg", action="store_true", help="use the fitted score model for G")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="one trajectory to JSON")
    sim.add_argument("--n", type=int)
    sim.add_argument("--include-data", action="store_true", help="embed the datasets")
    sub.add_parser("coverage", parents=[common], help="coverage and width per (policy, n, t)")
    qq = sub.add_parser("qq", parents=[common], help="squared Mahalanobis Q-Q against chi-square")
    qq.add_argument("--n", type=int)
    qq.add_argument("--t", type=int)
    sub.add_parser("score-eval", parents=[common], help="score-matching quality and V_t error")
    sub.add_parser("convergence", parents=[common], help="underlying trajectory against its bound")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.oracle_gradg and args.fitted_gradg:
        raise ConfigError("--oracle-gradg and --fitted-gradg are mutually exclusive")
    if args.oracle_gradg or args.fitted_gradg:
        mode = "oracle" if args.oracle_gradg else "fitted"
        changes["score"] = ScoreConfig(**{**config.score.__dict__, "mode": mode})
    return config.with_overrides(**changes) if changes else config


def _emit(args, stem: str, rows: list[dict], payload: dict | None = None) -> Path:
    if args.format == "csv":
        path = args.out / f"{stem}.csv"
        write_atomic(path, dumps_csv(rows, ex.CSV_COLUMNS[stem]))
    else:
        path = args.out / f"{stem}.json"
        write_atomic(path, dumps_json(payload if payload is not None else {"rows": rows}))
    return path


def run(args: argparse.Namespace) -> Path:
    config = resolve_config(args)
    if args.command == "simulate":
        path = args.out / "trajectory.json"
        write_atomic(path, dumps_json(ex.simulate(config, n=args.n, include_data=args.include_data)))
        return path
    if args.command == "coverage":
        summary = ex.run_coverage(config)
        return _emit(args, "coverage", summary.rows(), summary.to_dict())
    if args.command == "qq":
        sample = ex.run_qq_sample(config, n=args.n, t=args.t)
        if len(sample) < 100:
            raise ConfigError("a Q-Q diagnostic needs at least 100 trials")
        pairs = ex.qq_pairs(sample, config.model.d)
        rows = [{"rank": i + 1, "observed_m2": o, "chi2_quantile": q} for i, (o, q) in enumerate(pairs)]
        payload = {
            "rows": rows,
            "ks": ex.ks_chi2(sample, config.model.d),
            "mean_m2": float(np.mean(sample)),
        }
        return _emit(args, "qq", rows, payload)
    if args.command == "score-eval":
        rows = [asdict(r) for r in ex.run_score_eval(config)]
        return _emit(args, "score_eval", rows)
    rows = [asdict(r) for r in ex.run_convergence(config)]
    return _emit(args, "convergence", rows)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        path = run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    log.info("wrote %s", path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
