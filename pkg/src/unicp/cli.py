"""Command line entry point: simulate, oracle-check, predict."""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import config, oracle
from .core import DataPoint
from .engine import prediction_set
from .errors import UnicpError


def _simulate(args) -> int:
    cfg = config.load_config(args.config)
    exp = config.build_experiment(cfg, seed=args.seed, trials=args.trials, workers=args.workers)
    reports = config.run_experiment(exp)
    text = config.reports_to_csv(reports)
    with open(args.out, "w", newline="") as fh:
        fh.write(text)
    json_path = os.path.splitext(args.out)[0] + ".json"
    with open(json_path, "w") as fh:
        fh.write(config.reports_to_json(reports))
    for r in reports:
        lo, hi = r.wilson_ci
        print(f"{r.method} alpha={r.alpha} coverage={r.coverage:.4f} [{lo:.4f}, {hi:.4f}] trials={r.trials}")
    return 0


def _oracle_check(args) -> int:
    reports = oracle.run_suite(args.max_n, args.cases, args.seed, args.tol)
    ok = True
    for name, rep in reports.items():
        good = rep.passed(args.tol)
        ok &= good
        line = f"{'PASS' if good else 'FAIL'} {name}: cases={rep.cases_checked} max|diff|={rep.max_abs_diff:.3g}"
        if rep.first_failure:
            line += f" first failure: {rep.first_failure}"
        print(line)
    if not args.skip_type1:
        for name, rows in oracle.run_type1_suite().items():
            good = oracle.type1_ok(rows)
            ok &= good
            worst = max(rows, key=lambda r: float(r[1]) - r[0])
            print(f"{'PASS' if good else 'FAIL'} type1 {name}: worst alpha={worst[0]} rate={worst[1]}")
    return 0 if ok else 1


def _predict(args) -> int:
    training = config.read_training_csv(args.train)
    x = tuple(float(v) for v in args.x.split(","))
    if len(x) != len(training[0].x):
        raise config.ConfigurationError(f"x has {len(x)} features, training has {len(training[0].x)}")
    method = config.predict_method(args.method, len(training), score=args.score, n0=args.n0,
                                   bandwidth=args.bandwidth, nex_rate=args.nex_rate, samples=args.samples)
    grid = config.parse_grid(args.y_grid)
    rng = np.random.default_rng(args.seed)
    points = prediction_set(method, [DataPoint(p.x, p.y) for p in training], x, grid, args.alpha, rng)
    print("y,member,p")
    for pt in points:
        print(f"{pt.y!r},{int(pt.member)},{pt.p!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unicp", description="Conformal p-values under general conditional models.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a coverage experiment from a JSON config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True, help="CSV path; a JSON report is written next to it")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--trials", type=int)
    sim.add_argument("--workers", type=int)
    sim.set_defaults(func=_simulate)

    chk = sub.add_parser("oracle-check", help="compare fast p-values with brute-force enumeration")
    chk.add_argument("--max-n", type=int, default=5, help="largest dataset size (training plus test)")
    chk.add_argument("--cases", type=int, default=200)
    chk.add_argument("--seed", type=int, default=0)
    chk.add_argument("--tol", type=float, default=1e-12)
    chk.add_argument("--skip-type1", action="store_true", help="skip the exact toy-law type I error suite")
    chk.set_defaults(func=_oracle_check)

    pred = sub.add_parser("predict", help="prediction set on a y grid for one test point")
    pred.add_argument("--train", required=True, help="CSV with feature columns then the response")
    pred.add_argument("--x", required=True, help="comma-separated test features")
    pred.add_argument("--method", default="standard_cp", choices=config.METHODS)
    pred.add_argument("--score", choices=config.SCORES)
    pred.add_argument("--alpha", type=float, default=0.1)
    pred.add_argument("--y-grid", required=True, help="lo:hi:step")
    pred.add_argument("--seed", type=int, default=0)
    pred.add_argument("--n0", type=int)
    pred.add_argument("--bandwidth", type=float, default=1.0)
    pred.add_argument("--nex-rate", type=float, default=0.9)
    pred.add_argument("--samples", type=int, default=1000)
    pred.set_defaults(func=_predict)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UnicpError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
