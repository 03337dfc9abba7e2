"""Strict JSON experiment configs: build (method, generator) pairs and run them."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import core, methods, simlab
from .errors import ConfigurationError

TOP_KEYS = {
    "method", "score", "score_params", "alpha", "generator", "weights", "nex_weights", "kernel", "lr", "n0",
    "sampling", "seed", "trials", "workers", "inflation_samples",
}
GENERATOR_KEYS = {
    "exchangeable": {"type", "n", "d", "beta", "noise_sd"},
    "covariate_shift": {"type", "n", "d", "beta", "noise_sd", "train_mean", "test_mean"},
    "drift": {"type", "n", "d", "beta", "noise_sd", "per_index_means", "test_mean"},
    "fcs": {"type", "n", "d", "beta", "noise_sd", "acquisition", "init_mean"},
}
METHODS = ("standard_cp", "split_cp", "wcp", "wcp_unnormalized", "nexcp", "rlcp", "rlcp_resample", "gwcp",
           "gwcp_nonsym", "gwcp_is")
SCORES = ("abs_residual_mean", "abs_residual_ls", "recency_weighted_ls", "knn_residual")
CSV_COLUMNS = ["method", "alpha", "trials", "covered", "coverage", "ci_lo", "ci_hi", "floor", "inflation", "seed"]


def _strict(d: Any, allowed: set, where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


def build_generator(g: dict) -> simlab.GeneratorSpec:
    if not isinstance(g, dict) or "type" not in g:
        raise ConfigurationError("generator needs a 'type'")
    kind = g["type"]
    if kind not in GENERATOR_KEYS:
        raise ConfigurationError(f"unknown generator type {kind!r}")
    _strict(g, GENERATOR_KEYS[kind], "generator")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in g.items() if k != "type"}
    if kind == "drift" and "per_index_means" in kw:
        kw["per_index_means"] = tuple(tuple(m) if isinstance(m, list) else m for m in g["per_index_means"])
    cls = {"exchangeable": simlab.Exchangeable, "covariate_shift": simlab.CovariateShift,
           "drift": simlab.Drift, "fcs": simlab.FCS}[kind]
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def build_score(name: str, params: dict | None):
    params = _strict(params or {}, {"decay", "k"}, "score_params")
    if name == "abs_residual_mean":
        return core.abs_residual_mean()
    if name == "abs_residual_ls":
        return core.abs_residual_ls()
    if name == "recency_weighted_ls":
        return core.recency_weighted_ls(params.get("decay", 0.9))
    if name == "knn_residual":
        return core.knn_residual(params.get("k", 3))
    raise ConfigurationError(f"unknown score {name!r}; known: {SCORES}")


def build_kernel(k: dict | None):
    k = _strict(k or {"type": "gaussian", "bandwidth": 1.0}, {"type", "bandwidth", "radius"}, "kernel")
    if k.get("type", "gaussian") == "gaussian":
        return methods.Gaussian(float(k.get("bandwidth", 1.0)))
    if k["type"] == "box":
        return methods.Box(float(k.get("radius", 1.0)))
    raise ConfigurationError(f"unknown kernel {k['type']!r}")


def _oracle_weight(spec):
    if isinstance(spec, simlab.CovariateShift):
        return spec.wstar
    if isinstance(spec, simlab.Drift):
        return spec.mixture_weight
    return UNIFORM


UNIFORM = methods.PointWeight(lambda X: np.zeros(len(X)), name="uniform")


def build_weight(spec, w) -> tuple:
    """Return (callback, is_oracle)."""
    if w is None or w == "oracle":
        return _oracle_weight(spec), True
    if w == "uniform":
        return UNIFORM, isinstance(spec, simlab.Exchangeable)
    if isinstance(w, dict):
        _strict(w, {"type", "scale", "cap"}, "weights")
        base = _oracle_weight(spec)
        if w.get("type") == "scaled_oracle":
            return base.scaled(float(w.get("scale", 1.0))), True
        if w.get("type") == "capped_oracle":
            cap = float(w["cap"])
            return (lambda p: min(base(p), cap)), False
    raise ConfigurationError(f"unsupported weights {w!r}")


@dataclass
class Experiment:
    method: Any
    spec: simlab.GeneratorSpec
    alphas: list
    seed: int
    trials: int
    workers: int
    weight_is_oracle: bool
    weight: Any
    inflation_samples: int


def build_experiment(cfg: dict, seed: int | None = None, trials: int | None = None,
                     workers: int | None = None) -> Experiment:
    cfg = _strict(cfg, TOP_KEYS, "config")
    for key in ("method", "alpha", "generator"):
        if key not in cfg:
            raise ConfigurationError(f"config is missing {key!r}")
    spec = build_generator(cfg["generator"])
    name = cfg["method"]
    if name not in METHODS:
        raise ConfigurationError(f"unknown method {name!r}; known: {METHODS}")
    default_score = "recency_weighted_ls" if name in ("nexcp", "gwcp_nonsym", "gwcp_is") else (
        "knn_residual" if name == "split_cp" else "abs_residual_ls")
    score = build_score(cfg.get("score", default_score), cfg.get("score_params"))
    weight, is_oracle = build_weight(spec, cfg.get("weights"))
    lr_name = cfg.get("lr", "oracle")
    if lr_name not in ("oracle", "exchangeable"):
        raise ConfigurationError(f"unknown lr {lr_name!r}")
    lr = spec.permutation_lr() if lr_name == "oracle" else methods.LikelihoodRatio.exchangeable()
    sampling = _strict(cfg.get("sampling") or {}, {"mode", "samples"}, "sampling")
    M = int(sampling.get("samples", 500))

    if name == "standard_cp":
        method = methods.standard_cp(score)
    elif name == "split_cp":
        method = methods.split_cp(score, int(cfg.get("n0", spec.n // 2)))
    elif name == "wcp":
        method = methods.wcp(score, weight)
    elif name == "wcp_unnormalized":
        method = methods.wcp_unnormalized(score, weight)
    elif name == "nexcp":
        nw = _strict(cfg.get("nex_weights") or {}, {"rate"}, "nex_weights")
        method = methods.nexcp(score, methods.NexWeights.geometric(spec.n + 1, float(nw.get("rate", 0.9))))
    elif name == "rlcp":
        method = methods.rlcp(score, build_kernel(cfg.get("kernel")))
    elif name == "rlcp_resample":
        method = methods.rlcp_resample(score, build_kernel(cfg.get("kernel")))
    elif name == "gwcp":
        method = methods.gwcp(score, lr)
    elif name == "gwcp_nonsym":
        method = methods.gwcp_nonsym(score, lr)
    else:
        method = methods.gwcp_is(score, lr, M=M)

    mode = sampling.get("mode")
    if mode == "mc":
        method = methods.MonteCarlo(method, M)
    elif mode == "is":
        method = methods.ImportanceSampled(method, methods.standard_cp(score), M)
    elif mode is not None:
        raise ConfigurationError(f"unknown sampling mode {mode!r}")

    alphas = cfg["alpha"] if isinstance(cfg["alpha"], list) else [cfg["alpha"]]
    alphas = [float(a) for a in alphas]
    if any(not 0 < a < 1 for a in alphas):
        raise ConfigurationError("alpha values must lie in (0, 1)")
    return Experiment(
        method=method,
        spec=spec,
        alphas=alphas,
        seed=int(seed if seed is not None else cfg.get("seed", 0)),
        trials=int(trials if trials is not None else cfg.get("trials", 2000)),
        workers=int(workers if workers is not None else cfg.get("workers", 1)),
        weight_is_oracle=is_oracle,
        weight=weight,
        inflation_samples=int(cfg.get("inflation_samples", 50_000)),
    )


def _inflation(exp: Experiment) -> float | None:
    """Plug-in coverage inflation term for misspecified weighted methods, else None."""
    kind = type(exp.method).__name__
    if exp.weight_is_oracle or kind not in ("WCP", "StandardCP", "WCPUnnormalized"):
        return None
    w = exp.weight if kind != "StandardCP" else UNIFORM
    if isinstance(exp.spec, simlab.CovariateShift):
        if kind == "WCPUnnormalized":
            return simlab.estimate_positive_gap(exp.spec, w, exp.inflation_samples, exp.seed).value
        return simlab.estimate_l1_inflation(exp.spec, w, exp.inflation_samples, exp.seed).value
    if isinstance(exp.spec, simlab.Drift) and exp.spec.d == 1 and kind == "WCP":
        return simlab.drift_bound_terms(exp.spec, w, exp.inflation_samples // 5, exp.seed).total
    return None


def run_experiment(exp: Experiment) -> list[simlab.CoverageReport]:
    p = simlab.simulate_pvalues(exp.method, exp.spec, exp.trials, exp.seed, exp.workers)
    infl = _inflation(exp)
    reports = []
    for a in exp.alphas:
        floor = 1 - a - (infl or 0.0)
        reports.append(simlab.coverage_from_pvalues(p, a, exp.seed, floor, infl, exp.method.name))
    return reports


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow([_fmt(x) for x in (r.method, r.alpha, r.trials, r.covered, r.coverage, r.wilson_ci[0],
                                           r.wilson_ci[1], r.theoretical_floor, r.inflation_estimate, r.seed)])
    return buf.getvalue()


def reports_to_json(reports) -> str:
    return json.dumps([json.loads(r.to_json()) for r in reports], indent=2, sort_keys=True) + "\n"


def load_config(path: str) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc


def predict_method(name: str, n_train: int, *, score: str | None = None, decay: float = 0.9, k: int = 3,
                   bandwidth: float = 1.0, n0: int | None = None, nex_rate: float = 0.9, samples: int = 1000):
    """Method for the predict command: only methods that need no oracle side information."""
    if name not in METHODS:
        raise ConfigurationError(f"unknown method {name!r}; known: {METHODS}")
    default = "recency_weighted_ls" if name in ("nexcp", "gwcp_nonsym", "gwcp_is") else (
        "knn_residual" if name == "split_cp" else "abs_residual_ls")
    sc = build_score(score or default, {"decay": decay, "k": k})
    lr = methods.LikelihoodRatio.exchangeable()
    if name == "standard_cp":
        return methods.standard_cp(sc)
    if name == "split_cp":
        return methods.split_cp(sc, n0 if n0 is not None else max(1, n_train // 2))
    if name in ("wcp", "wcp_unnormalized"):
        ctor = methods.wcp if name == "wcp" else methods.wcp_unnormalized
        return ctor(sc, UNIFORM)
    if name == "nexcp":
        return methods.nexcp(sc, methods.NexWeights.geometric(n_train + 1, nex_rate))
    if name == "rlcp":
        return methods.rlcp(sc, methods.Gaussian(bandwidth))
    if name == "rlcp_resample":
        return methods.rlcp_resample(sc, methods.Gaussian(bandwidth))
    if name == "gwcp":
        return methods.gwcp(sc, lr)
    if name == "gwcp_nonsym":
        return methods.gwcp_nonsym(sc, lr)
    return methods.gwcp_is(sc, lr, M=samples)


def read_training_csv(path: str) -> list[core.DataPoint]:
    """Rows of feature columns followed by the response in the last column; a header row is skipped."""
    pts = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if not pts:
                    continue  # header
                raise ConfigurationError(f"non-numeric row in {path}: {row}")
            if len(vals) < 2:
                raise ConfigurationError(f"row needs features and a response: {row}")
            pts.append(core.DataPoint(vals[:-1], vals[-1]))
    if not pts:
        raise ConfigurationError(f"no data rows in {path}")
    return pts


def parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, step = (float(t) for t in text.split(":"))
    except ValueError as exc:
        raise ConfigurationError(f"grid must be lo:hi:step, got {text!r}") from exc
    if not step > 0 or hi < lo:
        raise ConfigurationError("grid needs step > 0 and hi >= lo")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(count)
