"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 run the full experiments and take several minutes each.
"""

import time

import numpy as np
import pytest

from cvgrad import cli
from cvgrad.cvgm import ElasticNetCV, KernelLogisticCV, LogisticCV, cv_loss_and_grad
from cvgrad.dataset import make_regression, make_rings, sample_splits
from cvgrad.gradcheck import LEARNERS, check_learner, random_qp
from cvgrad.kernel import init_kernel
from cvgrad.kkt_diff import qp_solve
from cvgrad.learners import (ElasticNetHyper, LogisticHyper, LossWeights, SvmHyper,
                             fit_elastic_net, fit_logistic, fit_loss_combination, fit_svm)

from oracles import elastic_net_cd, qp_active_set_enumeration, rel_err, ridge_closed_form


def test_criterion_1_learner_gradients(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, details = 0.0, []
    for name in LEARNERS:
        stable, total = 0, 0
        while stable < 50:
            res = check_learner(name, rng, 50 - stable)
            stable += res.instances - res.skipped
            total += res.instances
            worst = max(worst, res.max_rel_error)
        details.append(f"{name} 50/{total}")
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 120
    report(1, "learner dtheta/dalpha vs central differences", ok,
           f"max rel err {worst:.2e} ({', '.join(details)} stable), {elapsed:.1f}s")
    assert ok


def test_criterion_2_cv_gradient(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    problem = ElasticNetCV()
    worst, done, tried = 0.0, 0, 0
    while done < 20:
        tried += 1
        seed = int(rng.integers(1 << 31))
        data, _ = make_regression(30, 10, 8, 100.0, seed=seed)
        splits = sample_splits(30, 128, 0.95, seed=seed)
        alpha = np.exp(rng.uniform(np.log([1e-3, 1e-4]), np.log([10.0, 1.0])))
        _, g = cv_loss_and_grad(problem, data, splits, alpha)
        f = lambda a: cv_loss_and_grad(problem, data, splits, a, want_grad=False)[0]
        fd, fd_half = np.zeros(2), np.zeros(2)
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1e-4 * alpha[k]
            fd[k] = (f(alpha + e) - f(alpha - e)) / (2 * e[k])
            fd_half[k] = (f(alpha + e / 2) - f(alpha - e / 2)) / e[k]
        # an active-set change inside the stencil makes the difference step dependent
        if np.any(np.abs(fd - fd_half) > 1e-4 * np.maximum(np.abs(fd), 1e-6)):
            continue
        worst = max(worst, rel_err(g, fd))
        done += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 120
    report(2, "elastic-net CV gradient vs full-pipeline differences", ok,
           f"max rel err {worst:.2e} over 20 points ({tried} drawn), {elapsed:.1f}s")
    assert ok


def test_criterion_3_qp_solver(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    problems = [random_qp(rng) for _ in range(1000)]
    solve_time = -time.perf_counter()
    sols = [qp_solve(p) for p in problems]
    solve_time += time.perf_counter()
    worst_res, worst_obj = 0.0, 0.0
    for p, s in zip(problems, sols):
        worst_res = max(worst_res, s.kkt_residual)
        _, ref = qp_active_set_enumeration(p.Q, p.q, p.G, p.h, p.A, p.b)
        worst_obj = max(worst_obj, abs(s.objective - ref))
    elapsed = time.perf_counter() - t0
    ok = worst_res <= 1e-8 and worst_obj <= 1e-6 and solve_time < 60
    report(3, "QP solver on 1000 random problems", ok,
           f"max residual {worst_res:.1e}, max objective gap {worst_obj:.1e}, "
           f"solve {solve_time:.1f}s (with oracle {elapsed:.1f}s)")
    assert ok


def test_criterion_4_oracle_equivalences(report):
    rng = np.random.default_rng(4)
    cd, ridge, corner = 0.0, 0.0, 0.0
    for _ in range(10):
        X = rng.standard_normal((12, 5))
        y = X @ rng.standard_normal(5) + 0.3 * rng.standard_normal(12)
        lam1, lam2 = np.exp(rng.uniform(np.log(1e-3), np.log(1.0), 2))
        fit = fit_elastic_net(X, y, ElasticNetHyper(lam1, lam2))
        cd = max(cd, np.max(np.abs(fit.theta - elastic_net_cd(X, y, lam1, lam2))))
        fit0 = fit_elastic_net(X, y, ElasticNetHyper(0.0, lam2))
        ridge = max(ridge, np.max(np.abs(fit0.theta - ridge_closed_form(X, y, lam2))))

        Xc = rng.standard_normal((14, 3))
        yc = np.where(Xc @ rng.standard_normal(3) + 0.5 * rng.standard_normal(14) > 0, 1.0, -1.0)
        r = float(rng.uniform(0.1, 1.0))
        hinge = fit_loss_combination(Xc, yc, LossWeights((1, 0, 0, 0)), r).theta
        corner = max(corner, np.max(np.abs(hinge - fit_svm(Xc, yc, SvmHyper(0.0, r)).theta)))
        logi = fit_loss_combination(Xc, yc, LossWeights((0, 0, 0, 1)), r).theta
        ref = fit_logistic(Xc, yc, LogisticHyper(4.0 / (r * len(yc)))).theta / 2
        corner = max(corner, np.max(np.abs(logi - ref)))
    ok = cd <= 1e-5 and ridge <= 1e-6 and corner <= 1e-5
    report(4, "oracle equivalences", ok,
           f"coordinate descent {cd:.1e}, ridge {ridge:.1e}, loss-combination corners "
           f"{corner:.1e}")
    assert ok


def test_criterion_5_regression_table(report, tmp_path):
    t0 = time.perf_counter()
    final = {"cvgm": [], "grid": [], "random": []}
    for seed in range(25):
        cfg = cli.load_config("regress", overrides={"seed": seed})
        s = cli.run("regress", cfg, tmp_path / f"s{seed}")
        for m in final:
            final[m].append(s["methods"][m]["test_loss"])
    elapsed = time.perf_counter() - t0
    med = {m: float(np.median(v)) for m, v in final.items()}
    wins = float(np.mean(np.array(final["cvgm"]) < np.array(final["grid"])))
    ok = med["cvgm"] <= 1.02 * med["random"] and wins >= 0.6 and elapsed < 900
    report(5, "regression over 25 seeds", ok,
           f"median test loss cvgm {med['cvgm']:.3f} grid {med['grid']:.3f} random "
           f"{med['random']:.3f}, cvgm beats grid in {wins:.0%} of seeds, {elapsed:.0f}s")
    assert ok


def _kernel_runs(experiment, seeds, tmp_path):
    out = []
    for seed in seeds:
        cfg = cli.load_config(experiment, overrides={"seed": seed})
        out.append(cli.run(experiment, cfg, tmp_path / f"{experiment}{seed}"))
    return out


def test_criterion_6_rings(report, tmp_path):
    t0 = time.perf_counter()
    runs = _kernel_runs("rings", range(10), tmp_path)
    elapsed = time.perf_counter() - t0
    acc = np.median([r["methods"]["cvgm"]["test_accuracy"] for r in runs])
    init = np.median([r["methods"]["cvgm"]["initial_test_accuracy"] for r in runs])
    bayes = np.median([r["bayes_accuracy"]["test_set"] for r in runs])
    ok = acc >= 0.84 and abs(bayes - 0.89) <= 0.01 and init < 0.60 and elapsed < 1200
    report(6, "rings over 10 seeds", ok,
           f"median accuracy {acc:.3f}, Bayes on test sets {bayes:.3f}, iteration 0 "
           f"{init:.3f}, {elapsed:.0f}s")
    assert ok


def test_criterion_7_xor(report, tmp_path):
    t0 = time.perf_counter()
    runs = _kernel_runs("xor", range(5), tmp_path)
    elapsed = time.perf_counter() - t0
    acc = np.median([r["methods"]["cvgm"]["test_accuracy"] for r in runs])
    bayes = runs[0]["bayes_accuracy"]["analytic"]
    ok = acc >= 0.65 and abs(bayes - 0.85) <= 0.01 and elapsed < 1200
    report(7, "xor over 5 seeds", ok,
           f"median accuracy {acc:.3f} (needs >= 0.65), analytic Bayes {bayes:.4f} "
           f"(needs 0.85 +- 0.01), {elapsed:.0f}s")
    assert ok


SMALL = {
    "regress": {"K": 8, "iters": 5, "budget": 9, "grid_resolution": [3, 3], "n_test": 200},
    "rings": {"N": 20, "K": 8, "p": 0.75, "iters": 3, "n_test": 200, "snapshots": [1, 3]},
    "xor": {"N": 20, "K": 8, "p": 0.75, "iters": 3, "n_test": 200, "snapshots": [1, 3]},
}


def test_criterion_8_determinism(report, tmp_path):
    compared, differ = 0, []
    jobs = [(e, v, False) for e, v in SMALL.items()]
    jobs.append(("rings", {**SMALL["rings"], "sweep_sizes": [8, 16], "sweep_seeds": 2,
                           "e2e_steps": 5}, True))
    for experiment, values, sweep in jobs:
        dirs = []
        for rep in range(2):
            cfg = cli.load_config(experiment, overrides={**values, "seed": 5})
            d = tmp_path / f"{experiment}{int(sweep)}_{rep}"
            cli.run(experiment, cfg, d, sweep)
            dirs.append(d)
        for f in sorted(dirs[0].glob("*.csv")) + sorted(dirs[0].glob("*.txt")):
            compared += 1
            if f.read_bytes() != (dirs[1] / f.name).read_bytes():
                differ.append(f"{dirs[0].name}/{f.name}")
    ok = compared > 0 and not differ
    report(8, "byte-identical reruns", ok,
           f"{compared} files compared across regress, rings, xor and sweep, "
           f"{len(differ)} differ {differ[:3]}")
    assert ok


def test_criterion_9_parallel_reduction(report):
    cases = []
    reg, _ = make_regression(30, 10, 8, 100.0, seed=9)
    cases.append((ElasticNetCV(), reg, sample_splits(30, 64, 0.95, seed=9), [0.05, 0.01]))
    cases.append((LogisticCV(), make_rings(40, seed=9), sample_splits(40, 16, 0.8, seed=9),
                  [3.0]))
    rings = make_rings(30, seed=10)
    cases.append((KernelLogisticCV("two_layer", C=10.0), rings,
                  sample_splits(30, 12, 0.8, seed=10), init_kernel("two_layer", seed=10).to_vector()))
    worst = 0.0
    for problem, data, splits, alpha in cases:
        l1, g1 = cv_loss_and_grad(problem, data, splits, alpha, n_jobs=1)
        for jobs in (2, 4):
            lj, gj = cv_loss_and_grad(problem, data, splits, alpha, n_jobs=jobs)
            scale = max(abs(l1), np.max(np.abs(g1)), 1e-300)
            worst = max(worst, abs(lj - l1) / scale, np.max(np.abs(gj - g1)) / scale)
    ok = worst <= 1e-12
    report(9, "fold-parallel vs fold-serial", ok,
           f"max relative difference {worst:.1e} over elastic net, logistic and kernel")
    assert ok
