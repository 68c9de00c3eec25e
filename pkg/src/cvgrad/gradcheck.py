"""Finite-difference checks of every analytic derivative in the package.

Each check draws small random instances, compares the analytic derivative
with a central difference and reports the worst elementwise relative error
over entries whose finite-difference magnitude exceeds ``FLOOR``. Instances
whose active set changes inside the difference stencil are skipped, since
the solution map is not differentiable there.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .cvgm import ElasticNetCV, KernelLogisticCV, cv_loss_and_grad
from .dataset import make_regression, make_rings, sample_splits
from .kernel import init_kernel, kernel_backward, kernel_forward, KernelParams
from .kkt_diff import QpPerturbation, QpProblem, qp_jacobian, qp_solve
from .learners import (ElasticNetHyper, LogisticHyper, LossWeights, SvmHyper, fit_elastic_net,
                       fit_logistic, fit_loss_combination, fit_svm)

FLOOR = 1e-6
LEARNERS = ("logistic", "elastic_net", "svm", "loss_combination")
CHECKS = LEARNERS + ("qp", "kernel", "cv_elastic_net", "cv_kernel")
THRESHOLDS = {"qp": 1e-4, "kernel": 1e-5}
DEFAULT_THRESHOLD = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    threshold: float
    instances: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def relative_error(analytic, reference, floor: float = FLOOR) -> float:
    """Largest |a - r| / |r| over entries with |r| > floor (0 if there are none)."""
    a = np.ravel(analytic)
    r = np.ravel(reference)
    mask = np.abs(r) > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a[mask] - r[mask]) / np.abs(r[mask])))


def central_difference(fn, x, h):
    """Columns d fn / d x_k by central differences with per-coordinate steps ``h``."""
    x = np.asarray(x, dtype=float)
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h[k]
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h[k]))
    return np.stack(cols, axis=-1)


# -- random instances ----------------------------------------------------------

def _classification(rng):
    N, n = int(rng.integers(8, 21)), int(rng.integers(2, 7))
    X = rng.standard_normal((N, n))
    y = np.sign(X @ rng.standard_normal(n) + 0.5 * rng.standard_normal(N))
    y[y == 0] = 1.0
    return X, y


def _regression(rng):
    N, n = int(rng.integers(8, 21)), int(rng.integers(2, 7))
    X = rng.standard_normal((N, n))
    y = X @ rng.standard_normal(n) + 0.3 * rng.standard_normal(N)
    return X, y


def _pattern(theta, margins=None, tol=1e-7):
    parts = [np.abs(theta) > tol]
    if margins is not None:
        parts += [margins < 1 - tol, margins > 1 + tol]
    return np.concatenate(parts)


def _stable(pattern_at, alpha, steps) -> bool:
    base = pattern_at(alpha)
    for d in steps:
        if not (np.array_equal(pattern_at(alpha + d), base)
                and np.array_equal(pattern_at(alpha - d), base)):
            return False
    return True


def learner_instance(name: str, rng):
    """Return (map alpha -> theta, analytic jacobian, alpha, FD directions, pattern or None)."""
    if name == "logistic":
        X, y = _classification(rng)
        C = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        fmap = lambda a: fit_logistic(X, y, LogisticHyper(float(a[0]))).theta
        jac = fit_logistic(X, y, LogisticHyper(C)).jac_hyper
        return fmap, jac, np.array([C]), np.array([[1e-5 * C]]), None
    if name in ("elastic_net", "svm"):
        X, y = _regression(rng) if name == "elastic_net" else _classification(rng)
        lam = np.exp(rng.uniform(np.log([1e-3, 1e-2]), np.log([1e-1, 1.0])))
        if name == "elastic_net":
            fit = lambda a: fit_elastic_net(X, y, ElasticNetHyper(*map(float, a)))
            margins = lambda th: None
        else:
            fit = lambda a: fit_svm(X, y, SvmHyper(*map(float, a)))
            margins = lambda th: y * (X @ th)
        fmap = lambda a: fit(a).theta

        def pattern(a):
            th = fmap(a)
            return _pattern(th, margins(th))
        return fmap, fit(lam).jac_hyper, lam, np.diag(1e-5 * lam), pattern
    if name == "loss_combination":
        X, y = _classification(rng)
        w = 0.05 + 0.8 * rng.dirichlet(np.ones(4))
        w /= w.sum()
        fmap = lambda a: fit_loss_combination(X, y, LossWeights(tuple(a))).theta
        # stay on the simplex: differences along e_k - e_4
        dirs = 1e-5 * np.array([[1, 0, 0, -1], [0, 1, 0, -1], [0, 0, 1, -1]], dtype=float)

        def pattern(a):
            return _pattern(np.zeros(0), y * (X @ fmap(a)))
        return fmap, fit_loss_combination(X, y, LossWeights(tuple(w))).jac_hyper, w, dirs, \
            pattern
    raise ValueError(f"unknown learner {name!r}")


def check_learner(name: str, rng, instances: int, corrupt: float = 1.0) -> CheckResult:
    worst, skipped = 0.0, 0
    for _ in range(instances):
        fmap, jac, alpha, dirs, pattern = learner_instance(name, rng)
        if pattern is not None and not _stable(pattern, alpha, dirs):
            skipped += 1
            continue
        for d in dirs:
            h = np.linalg.norm(d)
            fd = (fmap(alpha + d) - fmap(alpha - d)) / (2 * h)
            worst = max(worst, relative_error(corrupt * jac @ (d / h), fd))
    return CheckResult(name, worst, DEFAULT_THRESHOLD, instances, skipped)


def random_qp(rng, m=None) -> QpProblem:
    """Random positive definite QP with box constraints and at most one equality."""
    m = int(rng.integers(2, 11)) if m is None else m
    R = rng.standard_normal((m, m))
    Q = R @ R.T + 0.5 * np.eye(m)
    G = np.vstack([np.eye(m), -np.eye(m)])
    h = rng.uniform(0.2, 1.5, 2 * m)
    A = rng.standard_normal((1, m)) if rng.random() < 0.5 else None
    # b from a point well inside the box keeps the problem strictly feasible
    b = A @ rng.uniform(-0.1, 0.1, m) if A is not None else None
    return QpProblem(Q, 3 * rng.standard_normal(m), G, h, A, b)


def check_qp(rng, instances: int, corrupt: float = 1.0, step: float = 1e-5) -> CheckResult:
    worst, skipped = 0.0, 0
    for _ in range(instances):
        p = random_qp(rng)
        S = rng.standard_normal((p.m, p.m))
        d = QpPerturbation(dQ=S + S.T, dq=rng.standard_normal(p.m), dh=rng.standard_normal(p.c),
                           db=None if p.e == 0 else rng.standard_normal(p.e))

        def moved(t):
            return QpProblem(p.Q + t * d.dQ, p.q + t * d.dq, p.G, p.h + t * d.dh, p.A,
                             None if p.e == 0 else p.b + t * d.db)

        probs = [moved(t) for t in (-step, 0.0, step)]
        sols = [qp_solve(pr) for pr in probs]
        active = [s.lambda_star > pr.h - pr.G @ s.v_star for s, pr in zip(sols, probs)]
        if not (np.array_equal(active[0], active[1]) and np.array_equal(active[1], active[2])):
            skipped += 1
            continue
        fd = (sols[2].v_star - sols[0].v_star) / (2 * step)
        worst = max(worst, relative_error(corrupt * qp_jacobian(p, sols[1], d), fd))
    return CheckResult("qp", worst, THRESHOLDS["qp"], instances, skipped)


def check_kernel(rng, instances: int, corrupt: float = 1.0, step: float = 1e-6) -> CheckResult:
    worst = 0.0
    for i in range(instances):
        arch = "one_layer" if i % 2 == 0 else "two_layer"
        kp = init_kernel(arch, seed=rng.integers(1 << 31))
        vec = kp.to_vector() + 0.1 * rng.standard_normal(kp.n_params)
        kp = KernelParams.from_vector(vec, kp.dims)
        X = rng.standard_normal((7, 2))
        W = rng.standard_normal((7, 2))
        V, tape = kernel_forward(kp, X)
        g = corrupt * kernel_backward(kp, tape, W).to_vector()
        loss = lambda v: float(np.sum(W * kernel_forward(KernelParams.from_vector(v, kp.dims),
                                                         X)[0]))
        for _ in range(3):
            d = rng.standard_normal(vec.size)
            fd = (loss(vec + step * d) - loss(vec - step * d)) / (2 * step)
            worst = max(worst, relative_error(g @ d, fd))
    return CheckResult("kernel", worst, THRESHOLDS["kernel"], instances, 0)


def _cv_check(name, problem, data, splits, alpha, dirs, corrupt):
    _, g = cv_loss_and_grad(problem, data, splits, alpha)
    worst, kinked = 0.0, False
    for d in dirs:
        h = np.linalg.norm(d)
        f = lambda t: cv_loss_and_grad(problem, data, splits, alpha + t * d, want_grad=False)[0]
        fd = (f(1.0) - f(-1.0)) / (2 * h)
        fd_half = (f(0.5) - f(-0.5)) / h
        # a fold changing its active set inside the stencil shows up as step dependence
        if abs(fd - fd_half) > 1e-4 * max(abs(fd), FLOOR):
            kinked = True
            break
        worst = max(worst, relative_error(corrupt * g @ (d / h), fd))
    return worst, kinked


def check_cv_elastic_net(rng, instances: int, corrupt: float = 1.0) -> CheckResult:
    worst, skipped = 0.0, 0
    problem = ElasticNetCV()
    for _ in range(instances):
        seed = int(rng.integers(1 << 31))
        data, _ = make_regression(30, 10, 8, 100.0, seed=seed)
        splits = sample_splits(30, 16, 0.95, seed=seed)
        alpha = np.exp(rng.uniform(np.log(1e-4), np.log(1e-1), 2))
        err, kinked = _cv_check("cv_elastic_net", problem, data, splits, alpha,
                                np.diag(1e-4 * alpha), corrupt)
        skipped += kinked
        worst = max(worst, err)
    return CheckResult("cv_elastic_net", worst, DEFAULT_THRESHOLD, instances, skipped)


def check_cv_kernel(rng, instances: int, corrupt: float = 1.0) -> CheckResult:
    worst, skipped = 0.0, 0
    problem = KernelLogisticCV("one_layer", C=10.0)
    for _ in range(instances):
        seed = int(rng.integers(1 << 31))
        data = make_rings(16, seed=seed)
        splits = sample_splits(16, 4, 0.75, seed=seed)
        alpha = init_kernel("one_layer", seed=seed).to_vector()
        dirs = 1e-6 * rng.standard_normal((2, alpha.size))
        err, kinked = _cv_check("cv_kernel", problem, data, splits, alpha, dirs, corrupt)
        skipped += kinked
        worst = max(worst, err)
    return CheckResult("cv_kernel", worst, DEFAULT_THRESHOLD, instances, skipped)


def run_checks(names=CHECKS, instances: int = 10, seed=0, corrupt: bool = False) -> list:
    """Run the named checks; ``corrupt`` scales every analytic derivative by 1.01."""
    rng = np.random.default_rng(seed)
    scale = 1.01 if corrupt else 1.0
    out = []
    for name in names:
        if name in LEARNERS:
            out.append(check_learner(name, rng, instances, scale))
        elif name == "qp":
            out.append(check_qp(rng, instances, scale))
        elif name == "kernel":
            out.append(check_kernel(rng, instances, scale))
        elif name == "cv_elastic_net":
            out.append(check_cv_elastic_net(rng, instances, scale))
        elif name == "cv_kernel":
            out.append(check_cv_kernel(rng, instances, scale))
        else:
            raise ValueError(f"unknown check {name!r}; choose from {list(CHECKS)}")
    return out
