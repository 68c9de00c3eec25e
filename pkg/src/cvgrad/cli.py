"""Command-line experiments: ``cvgrad <regress|rings|xor|gradcheck> --config FILE``.

Every run writes CSV traces plus one ``summary.json`` into the output
directory. CSV content depends only on (config, seed); the summary also
records wall-clock time.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import gradcheck
from .baselines import SearchSpace, grid_search, random_search, train_end_to_end
from .cvgm import ElasticNetCV, KernelLogisticCV, CvgmConfig, cvgm_run
from .dataset import (make_regression, make_rings, make_xor, rings_bayes_predict,
                      rings_bayes_rate, sample_splits, xor_bayes_accuracy, xor_bayes_predict)
from .errors import CvgradError
from .kernel import ARCHITECTURES, init_kernel, kernel_forward, save_kernel
from .learners import LogisticHyper, accuracy, fit_logistic, loss_softmargin

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_GRADCHECK = 0, 1, 2, 3

_COMMON = {"seed": 0, "n_jobs": 1}

_CLASSIFY = {
    "n_test": 1000, "K": 256, "p": 0.95, "C": 10.0, "step_size": 0.1, "iters": 100,
    "sweep_sizes": [8, 16, 32, 64, 128, 200], "sweep_seeds": 25,
    "e2e_step_size": 1e-2, "e2e_steps": 100,
}

DEFAULTS = {
    "regress": {
        **_COMMON, "N": 30, "n": 10, "n_informative": 8, "noise_std": 100.0, "n_test": 1000,
        "K": 128, "p": 0.95, "step_size": 2e-4, "iters": 100,
        "lambda1_init": 1e-2, "lambda2_init": 1e-4,
        "search_lo": [1e-4, 1e-4], "search_hi": [1e-1, 1e-1], "grid_resolution": [10, 10],
        "budget": 100, "loss_scale": 1000.0,
    },
    "rings": {
        **_COMMON, **_CLASSIFY, "N": 60, "r1": 1.0, "r2": 2.0, "radial_std": 0.4,
        "architecture": "one_layer", "snapshots": [1, 10, 20, 100],
    },
    "xor": {
        **_COMMON, **_CLASSIFY, "N": 100, "architecture": "two_layer",
        "snapshots": [1, 2, 5, 50],
    },
    "gradcheck": {
        **_COMMON, "checks": list(gradcheck.CHECKS), "instances": 10, "corrupt": False,
    },
}


class ConfigError(ValueError):
    pass


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def load_config(experiment: str, path=None, overrides=None) -> dict:
    """Defaults for ``experiment`` updated from a flat YAML mapping."""
    cfg = dict(DEFAULTS[experiment])
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a flat key: value mapping")
    raw.update(overrides or {})
    for key, value in raw.items():
        if key not in cfg:
            raise ConfigError(f"unknown key {key!r} for {experiment}; known: {sorted(cfg)}")
        cfg[key] = _coerce(key, value, cfg[key])
    if experiment in ("rings", "xor") and cfg["architecture"] not in ARCHITECTURES:
        raise ConfigError(f"architecture must be one of {sorted(ARCHITECTURES)}")
    if experiment == "gradcheck":
        unknown = set(cfg["checks"]) - set(gradcheck.CHECKS)
        if unknown:
            raise ConfigError(f"unknown checks {sorted(unknown)}")
    return cfg


def _cvgm_config(cfg, seed) -> CvgmConfig:
    try:
        return CvgmConfig(K=cfg["K"], p=cfg["p"], step_size=cfg["step_size"],
                          max_iters=cfg["iters"], seed=seed, n_jobs=cfg["n_jobs"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


# -- regression --------------------------------------------------------------

def run_regress(cfg: dict, out: Path) -> dict:
    seed = cfg["seed"]
    try:
        data, coef = make_regression(cfg["N"], cfg["n"], cfg["n_informative"], cfg["noise_std"],
                                     seed=[seed, 0])
        test, _ = make_regression(cfg["n_test"], cfg["n"], cfg["n_informative"],
                                  cfg["noise_std"], seed=[seed, 1], coef=coef)
        problem = ElasticNetCV(loss_scale=cfg["loss_scale"])
        splits = sample_splits(data.N, cfg["K"], cfg["p"], seed=[seed, 2])
        space = SearchSpace(tuple(cfg["search_lo"]), tuple(cfg["search_hi"]),
                            tuple(cfg["grid_resolution"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ccfg = _cvgm_config(cfg, [seed, 2])
    alpha0 = [cfg["lambda1_init"], cfg["lambda2_init"]]

    alpha, trace = cvgm_run(problem, data, ccfg, alpha0, test, splits=splits)
    trace.to_csv(out / "cvgm_trace.csv")
    g_alpha, g_log = grid_search(problem, data, splits, space, cfg["budget"],
                                 n_jobs=cfg["n_jobs"])
    g_log.to_csv(out / "grid_log.csv")
    r_alpha, r_log = random_search(problem, data, splits, space, cfg["budget"], seed=[seed, 3],
                                   n_jobs=cfg["n_jobs"])
    r_log.to_csv(out / "random_log.csv")

    # test loss of each method's current choice after every step
    cache = {}

    def test_loss(a):
        key = tuple(np.asarray(a, dtype=float))
        if key not in cache:
            cache[key] = problem.evaluate(a, data, test)["test_loss"]
        return cache[key]

    steps = max(len(trace), len(g_log), len(r_log))
    rows = [["step", "cvgm_test_loss", "grid_test_loss", "random_test_loss"]]
    for k in range(steps):
        row = [str(k)]
        row.append(_fmt(trace.records[min(k, len(trace) - 1)].metrics["test_loss"]))
        for log in (g_log, r_log):
            best = log.records[log.best_index_at(min(k, len(log) - 1))].alpha
            row.append(_fmt(test_loss(best)))
        rows.append(row)
    _write_rows(out / "progress.csv", rows)

    methods = {}
    for name, a, cv in (("cvgm", alpha, trace.records[-1].cv_loss),
                        ("grid", g_alpha, g_log.records[-1].best_so_far),
                        ("random", r_alpha, r_log.records[-1].best_so_far)):
        methods[name] = {"alpha": [float(x) for x in a], "cv_loss": float(cv),
                         "test_loss": float(test_loss(a))}
    return {"methods": methods}


# -- kernel learning ---------------------------------------------------------

def _classification_data(kind, cfg, N, seed):
    if kind == "rings":
        gen = lambda n, s: make_rings(n, cfg["r1"], cfg["r2"], cfg["radial_std"], seed=s)
    else:
        gen = lambda n, s: make_xor(n, seed=s)
    return gen(N, [seed, 0]), gen(cfg["n_test"], [seed, 1])


def _bayes(kind, cfg, test) -> dict:
    if kind == "rings":
        pred = rings_bayes_predict(test.features, cfg["r1"], cfg["r2"])
        analytic = rings_bayes_rate(cfg["r1"], cfg["r2"], cfg["radial_std"])
    else:
        pred = xor_bayes_predict(test.features)
        analytic = xor_bayes_accuracy()
    return {"analytic": float(analytic), "test_set": accuracy(pred, test.targets)}


def run_kernel_experiment(kind: str, cfg: dict, out: Path) -> dict:
    seed = cfg["seed"]
    try:
        data, test = _classification_data(kind, cfg, cfg["N"], seed)
        problem = KernelLogisticCV(cfg["architecture"], C=cfg["C"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ccfg = _cvgm_config(cfg, [seed, 3])
    alpha0 = init_kernel(cfg["architecture"], seed=[seed, 2]).to_vector()
    data.to_csv(out / "train.csv")
    test.to_csv(out / "test.csv")

    wanted = set(cfg["snapshots"]) | {0}
    snapshots = {}

    def snapshot(rec):
        if rec.iter not in wanted:
            return
        kp, res = problem.fit_full(rec.alpha, data)
        save_kernel(out / f"kernel_iter{rec.iter:04d}.txt", kp)
        V, _ = kernel_forward(kp, test.features)
        rows = [["v0", "v1", "y"]] + [[_fmt(a), _fmt(b), _fmt(t)]
                                      for (a, b), t in zip(V, test.targets)]
        _write_rows(out / f"embedding_iter{rec.iter:04d}.csv", rows)
        snapshots[rec.iter] = [float(t) for t in res.theta]

    alpha, trace = cvgm_run(problem, data, ccfg, alpha0, test, callback=snapshot)
    trace.to_csv(out / "cvgm_trace.csv")
    last = trace.records[-1]
    return {
        "methods": {"cvgm": {"cv_loss": last.cv_loss,
                             "test_accuracy": last.metrics["test_accuracy"],
                             "test_loss": last.metrics["test_loss"],
                             "initial_test_accuracy": trace.records[0].metrics["test_accuracy"]}},
        "bayes_accuracy": _bayes(kind, cfg, test),
        "boundary_theta": {str(k): v for k, v in sorted(snapshots.items())},
    }


def run_sweep(kind: str, cfg: dict, out: Path) -> dict:
    """CVGM vs an end-to-end network vs logistic regression over training set sizes."""
    rows = [["size", "seed", "method", "test_loss", "test_accuracy"]]
    results = {}
    problem = KernelLogisticCV(cfg["architecture"], C=cfg["C"])
    for size in cfg["sweep_sizes"]:
        for s in range(cfg["sweep_seeds"]):
            seed = cfg["seed"] + s
            data, test = _classification_data(kind, cfg, size, seed)
            alpha0 = init_kernel(cfg["architecture"], seed=[seed, 2]).to_vector()
            alpha, _ = cvgm_run(problem, data, _cvgm_config(cfg, [seed, 3]), alpha0)
            cv = problem.evaluate(alpha, data, test)
            net, _ = train_end_to_end(data.features, data.targets, cfg["architecture"],
                                      cfg["e2e_step_size"], cfg["e2e_steps"], seed=[seed, 4])
            yhat = net.decision(test.features)
            e2e = {"test_loss": loss_softmargin(yhat, test.targets),
                   "test_accuracy": accuracy(yhat, test.targets)}
            lr = fit_logistic(data.features, data.targets, LogisticHyper(cfg["C"]))
            yhat = test.features @ lr.theta
            plain = {"test_loss": loss_softmargin(yhat, test.targets),
                     "test_accuracy": accuracy(yhat, test.targets)}
            for name, m in (("cvgm", cv), ("end_to_end", e2e), ("logistic", plain)):
                rows.append([str(size), str(seed), name, _fmt(m["test_loss"]),
                             _fmt(m["test_accuracy"])])
                results.setdefault(name, {}).setdefault(size, []).append(m["test_loss"])
    _write_rows(out / "sweep.csv", rows)
    return {"sweep_median_test_loss": {
        name: {str(size): float(np.median(v)) for size, v in by_size.items()}
        for name, by_size in results.items()}}


def run_gradcheck(cfg: dict, out: Path) -> dict:
    results = gradcheck.run_checks(cfg["checks"], cfg["instances"], cfg["seed"],
                                   corrupt=cfg["corrupt"])
    return {"checks": [r.to_dict() for r in results],
            "passed": all(r.passed for r in results)}


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cvgrad", description=__doc__.splitlines()[0])
    ap.add_argument("experiment", choices=sorted(DEFAULTS))
    ap.add_argument("--config", help="flat YAML file of key: value overrides")
    ap.add_argument("--seed", type=int, help="overrides the config seed")
    ap.add_argument("--out", default="cvgrad_out", help="output directory")
    ap.add_argument("--sweep", action="store_true",
                    help="rings/xor: compare against baselines over training set sizes")
    return ap


def run(experiment: str, cfg: dict, out, sweep: bool = False) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if experiment == "regress":
        body = run_regress(cfg, out)
    elif experiment == "gradcheck":
        body = run_gradcheck(cfg, out)
    elif sweep:
        body = run_sweep(experiment, cfg, out)
    else:
        body = run_kernel_experiment(experiment, cfg, out)
    summary = {"experiment": experiment, "config": cfg, "seed": cfg["seed"], **body,
               "wall_time_s": time.perf_counter() - t0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.sweep and args.experiment not in ("rings", "xor"):
        print("--sweep only applies to rings and xor", file=sys.stderr)
        return EXIT_CONFIG
    try:
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = load_config(args.experiment, args.config, overrides)
        summary = run(args.experiment, cfg, args.out, args.sweep)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CvgradError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if args.experiment == "gradcheck":
        for c in summary["checks"]:
            status = "ok" if c["passed"] else "FAIL"
            print(f"{status:4} {c['name']:18} max rel err {c['max_rel_error']:.2e} "
                  f"(threshold {c['threshold']:.0e}, skipped {c['skipped']}/{c['instances']})")
        if not summary["passed"]:
            bad = [c["name"] for c in summary["checks"] if not c["passed"]]
            print(f"gradient check failed: {', '.join(bad)}", file=sys.stderr)
            return EXIT_GRADCHECK
        return EXIT_OK
    for name, m in summary.get("methods", {}).items():
        metrics = ", ".join(f"{k}={v:.4g}" for k, v in m.items() if isinstance(v, float))
        print(f"{name}: {metrics}")
    print(f"wrote {args.out}/summary.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
