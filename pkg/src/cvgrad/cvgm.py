"""Projected gradient descent on the cross-validation risk.

A *problem* bundles a learner, a validation loss and (optionally) a feature
map. It exposes ``fold_terms(data, splits, alpha, want_grad)`` returning the
per-fold validation losses and their gradients with respect to ``alpha``,
plus ``evaluate(alpha, train, test)`` for held-out reporting. Everything in
this module is written against that interface.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, fit_normalizer, sample_splits
from .errors import CvgradError, DifferentiabilityError, DivergenceError, FoldError
from .kernel import ARCHITECTURES, KernelParams, kernel_backward, kernel_forward
from .learners import (LAMBDA2_FLOOR, LogisticHyper, LossWeights, accuracy, elastic_net_batch,
                       fit_elastic_net, fit_logistic, fit_loss_combination, logistic_batch,
                       loss_regression, loss_softmargin, softmargin_derivative, softmargin_terms,
                       ElasticNetHyper)


# -- projections -------------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    kind: str = "none"          # "none", "box" or "simplex"
    lo: tuple | None = None
    hi: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("none", "box", "simplex"):
            raise ValueError(f"unknown projection {self.kind!r}")


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = 1} by sorting."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def project(alpha, descriptor: Projection) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if descriptor.kind == "box":
        lo = -np.inf if descriptor.lo is None else np.asarray(descriptor.lo, dtype=float)
        hi = np.inf if descriptor.hi is None else np.asarray(descriptor.hi, dtype=float)
        return np.clip(alpha, lo, hi)
    if descriptor.kind == "simplex":
        return project_simplex(alpha)
    return alpha.copy()


# -- helpers -----------------------------------------------------------------

def _groups(splits):
    """Fold indices grouped by (train size, validation size), in order."""
    groups = defaultdict(list)
    for j, s in enumerate(splits):
        groups[(len(s.train_idx), len(s.val_idx))].append(j)
    return list(groups.values())


def _ordered_mean(rows) -> np.ndarray:
    # sequential sum in fold order: independent of how folds were scheduled
    acc = np.zeros_like(rows[0], dtype=float)
    for r in rows:
        acc = acc + r
    return acc / len(rows)


# -- problems ----------------------------------------------------------------

class ElasticNetCV:
    """Elastic-net regression scored by validation mean squared error.

    Each fold standardizes features with statistics of its own training rows
    and removes the training mean of y as an unpenalized intercept; both are
    treated as constants with respect to (lambda1, lambda2). Losses and
    gradients are divided by ``loss_scale``, which sets the effective step
    size of a fixed-step descent on raw squared errors.
    """

    dim = 2
    projection = Projection("box", lo=(0.0, LAMBDA2_FLOOR))

    def __init__(self, normalize: bool = True, loss_scale: float = 1.0):
        if loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        self.normalize = normalize
        self.loss_scale = loss_scale

    def _prepare(self, X, y, split):
        Xt, Xv = X[split.train_idx], X[split.val_idx]
        if self.normalize:
            nrm = fit_normalizer(Xt)
            Xt, Xv = nrm.transform(Xt), nrm.transform(Xv)
        yt = y[split.train_idx]
        return Xt, Xv, yt, float(yt.mean())

    def fold_terms(self, data: Dataset, splits, alpha, want_grad: bool = True):
        lam1, lam2 = (float(a) for a in alpha)
        X, y = data.features, data.targets
        K = len(splits)
        losses = np.empty(K)
        grads = np.empty((K, 2)) if want_grad else None
        for idx in _groups(splits):
            prepared = [self._prepare(X, y, splits[j]) for j in idx]
            Xt = np.stack([p[0] for p in prepared])
            yc = np.stack([p[2] - p[3] for p in prepared])
            try:
                theta, jac, sol = elastic_net_batch(Xt, yc, lam1, lam2, want_jac=want_grad)
            except DifferentiabilityError as exc:
                raise FoldError(idx[exc.batch_index], exc) from exc
            if not sol.converged.all():
                bad = int(np.flatnonzero(~sol.converged)[0])
                raise FoldError(idx[bad], CvgradError(f"QP residual {sol.residual[bad]:.2e}"))
            for r, j in enumerate(idx):
                _, Xv, _, icpt = prepared[r]
                yv = y[splits[j].val_idx]
                resid = Xv @ theta[r] + icpt - yv
                losses[j] = np.mean(resid ** 2) / self.loss_scale
                if want_grad:
                    grads[j] = (2.0 / (len(yv) * self.loss_scale)) * (resid @ Xv) @ jac[r]
        return losses, grads

    def fit_full(self, alpha, train: Dataset):
        nrm = fit_normalizer(train.features) if self.normalize else None
        Xt = nrm.transform(train.features) if nrm else train.features
        res = fit_elastic_net(Xt, train.targets, ElasticNetHyper(*map(float, alpha)),
                              fit_intercept=True)
        return nrm, res

    def evaluate(self, alpha, train: Dataset, test: Dataset) -> dict:
        nrm, res = self.fit_full(alpha, train)
        Xs = nrm.transform(test.features) if nrm else test.features
        mse = loss_regression(Xs @ res.theta + res.intercept, test.targets)
        return {"test_loss": mse / self.loss_scale}


class KernelLogisticCV:
    """Logistic regression on learned features phi_alpha(x), soft-margin validation loss.

    ``alpha`` is the flat parameter vector of a ReLU network. Gradients flow
    through both the validation features and, via d theta*/d v_i, through
    every training feature of the fold.
    """

    projection = Projection("none")

    def __init__(self, arch: str = "one_layer", C: float = 10.0):
        self.dims = ARCHITECTURES[arch]
        self.arch = arch
        self.C = C
        self.dim = sum(o * i + o for i, o in zip(self.dims, self.dims[1:]))

    def params(self, alpha) -> KernelParams:
        return KernelParams.from_vector(alpha, self.dims)

    def fold_terms(self, data: Dataset, splits, alpha, want_grad: bool = True):
        kp = self.params(alpha)
        V, tape = kernel_forward(kp, data.features)
        y = data.targets
        K, N = len(splits), data.N
        losses = np.empty(K)
        dV = np.zeros((K, N, V.shape[1])) if want_grad else None
        C = self.C
        for idx in _groups(splits):
            tr = np.stack([splits[j].train_idx for j in idx])
            va = np.stack([splits[j].val_idx for j in idx])
            Vt, yt = V[tr], y[tr]
            theta, H, pi, ok = logistic_batch(Vt, yt, C)
            if not ok.all():
                bad = int(np.flatnonzero(~ok)[0])
                raise FoldError(idx[bad], CvgradError("logistic Newton did not converge"))
            Vv, yv = V[va], y[va]
            yhat = np.einsum("kmd,kd->km", Vv, theta)
            losses[idx] = softmargin_terms(yhat, yv).mean(axis=1)
            if not want_grad:
                continue
            dyhat = softmargin_derivative(yhat, yv) / va.shape[1]
            dtheta = np.einsum("km,kmd->kd", dyhat, Vv)
            u = np.linalg.solve(H, dtheta[..., None])[..., 0]
            vu = np.einsum("kmd,kd->km", Vt, u)
            d_train = -C * (((pi - 1.0) * yt)[..., None] * u[:, None, :]
                            + (pi * (1 - pi) * vu)[..., None] * theta[:, None, :])
            d_val = dyhat[..., None] * theta[:, None, :]
            rows = np.asarray(idx)[:, None]
            dV[rows, tr] += d_train
            dV[rows, va] += d_val
        grads = kernel_backward(kp, tape, dV).to_vector() if want_grad else None
        return losses, grads

    def fit_full(self, alpha, train: Dataset):
        kp = self.params(alpha)
        V, _ = kernel_forward(kp, train.features)
        return kp, fit_logistic(V, train.targets, LogisticHyper(self.C))

    def evaluate(self, alpha, train: Dataset, test: Dataset) -> dict:
        kp, res = self.fit_full(alpha, train)
        Vs, _ = kernel_forward(kp, test.features)
        yhat = Vs @ res.theta
        return {"test_loss": loss_softmargin(yhat, test.targets),
                "test_accuracy": accuracy(yhat, test.targets)}


class LogisticCV:
    """Logistic regression with hyperparameter C, soft-margin validation loss."""

    dim = 1
    projection = Projection("box", lo=(1e-8,))

    def fold_terms(self, data: Dataset, splits, alpha, want_grad: bool = True):
        C = float(alpha[0])
        X, y = data.features, data.targets
        losses = np.empty(len(splits))
        grads = np.empty((len(splits), 1)) if want_grad else None
        for idx in _groups(splits):
            tr = np.stack([splits[j].train_idx for j in idx])
            va = np.stack([splits[j].val_idx for j in idx])
            theta, H, pi, ok = logistic_batch(X[tr], y[tr], C)
            if not ok.all():
                bad = int(np.flatnonzero(~ok)[0])
                raise FoldError(idx[bad], CvgradError("logistic Newton did not converge"))
            yhat = np.einsum("kmd,kd->km", X[va], theta)
            losses[idx] = softmargin_terms(yhat, y[va]).mean(axis=1)
            if want_grad:
                crossC = np.einsum("kmd,km->kd", X[tr], (pi - 1.0) * y[tr])
                jac = -np.linalg.solve(H, crossC[..., None])[..., 0]
                dyhat = softmargin_derivative(yhat, y[va]) / va.shape[1]
                grads[idx, 0] = np.einsum("km,kmd,kd->k", dyhat, X[va], jac)
        return losses, grads

    def evaluate(self, alpha, train: Dataset, test: Dataset) -> dict:
        res = fit_logistic(train.features, train.targets, LogisticHyper(float(alpha[0])))
        yhat = test.features @ res.theta
        return {"test_loss": loss_softmargin(yhat, test.targets),
                "test_accuracy": accuracy(yhat, test.targets)}


class LossCombinationCV:
    """Learn the mixture weights of four surrogate losses (soft-margin validation loss)."""

    dim = 4
    projection = Projection("simplex")

    def __init__(self, ridge: float = 1.0):
        self.ridge = ridge

    def fold_terms(self, data: Dataset, splits, alpha, want_grad: bool = True):
        w = LossWeights(tuple(alpha))
        X, y = data.features, data.targets
        losses = np.empty(len(splits))
        grads = np.empty((len(splits), 4)) if want_grad else None
        for j, s in enumerate(splits):
            try:
                res = fit_loss_combination(X[s.train_idx], y[s.train_idx], w, self.ridge)
            except CvgradError as exc:
                raise FoldError(j, exc) from exc
            Xv, yv = X[s.val_idx], y[s.val_idx]
            yhat = Xv @ res.theta
            losses[j] = loss_softmargin(yhat, yv)
            if want_grad:
                grads[j] = (softmargin_derivative(yhat, yv) / len(yv)) @ Xv @ res.jac_hyper
        return losses, grads

    def evaluate(self, alpha, train: Dataset, test: Dataset) -> dict:
        res = fit_loss_combination(train.features, train.targets, LossWeights(tuple(alpha)),
                                   self.ridge)
        yhat = test.features @ res.theta
        return {"test_loss": loss_softmargin(yhat, test.targets),
                "test_accuracy": accuracy(yhat, test.targets)}


# -- cross-validation objective ----------------------------------------------

def fold_terms(problem, data: Dataset, splits, alpha, *, n_jobs: int = 1,
               want_grad: bool = True):
    """Per-fold losses and gradients, optionally computed on a thread pool."""
    alpha = np.asarray(alpha, dtype=float)
    if n_jobs <= 1 or len(splits) < 2:
        return problem.fold_terms(data, splits, alpha, want_grad)
    chunks = [c for c in np.array_split(np.arange(len(splits)), n_jobs) if c.size]

    def run(chunk):
        try:
            return problem.fold_terms(data, [splits[j] for j in chunk], alpha, want_grad)
        except FoldError as exc:
            raise FoldError(int(chunk[exc.fold_index]), exc.cause) from exc

    with ThreadPoolExecutor(len(chunks)) as ex:
        parts = list(ex.map(run, chunks))
    losses = np.concatenate([p[0] for p in parts])
    grads = np.concatenate([p[1] for p in parts]) if want_grad else None
    return losses, grads


def cv_loss_and_grad(problem, data: Dataset, splits, alpha, *, n_jobs: int = 1,
                     want_grad: bool = True):
    """Average validation loss over the splits and its gradient in ``alpha``."""
    losses, grads = fold_terms(problem, data, splits, alpha, n_jobs=n_jobs, want_grad=want_grad)
    loss = float(_ordered_mean(list(losses)))
    grad = _ordered_mean(list(grads)) if want_grad else None
    return loss, grad


# -- the optimization loop ---------------------------------------------------

@dataclass(frozen=True)
class CvgmConfig:
    K: int = 128
    p: float = 0.95
    step_size: float = 2e-4
    max_iters: int = 100
    projection: Projection | None = None   # None: the problem's own constraint set
    seed: int | None = 0
    convergence_tol: float = 0.0
    stratified: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if not self.step_size >= 0.0:
            raise ValueError("step_size must be nonnegative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")


@dataclass
class TraceRecord:
    iter: int
    alpha: np.ndarray
    cv_loss: float
    grad_norm: float
    metrics: dict = field(default_factory=dict)


@dataclass
class CvgmTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def cv_losses(self) -> np.ndarray:
        return np.array([r.cv_loss for r in self.records])

    def column(self, name: str) -> np.ndarray:
        return np.array([r.metrics.get(name, np.nan) for r in self.records])

    def rows(self):
        extra = sorted({k for r in self.records for k in r.metrics} - {"test_loss"})
        d = self.records[0].alpha.size if self.records else 0
        header = ["iter", "cv_loss", "grad_norm", "test_loss", *extra]
        header += [f"alpha{i}" for i in range(d)] if d <= 8 else ["alpha_norm"]
        out = [header]
        for r in self.records:
            tl = r.metrics.get("test_loss")
            row = [str(r.iter), repr(r.cv_loss), repr(r.grad_norm),
                   "" if tl is None else repr(float(tl))]
            row += [repr(float(r.metrics[k])) if k in r.metrics else "" for k in extra]
            if d <= 8:
                row += [repr(float(a)) for a in r.alpha]
            else:
                row.append(repr(float(np.linalg.norm(r.alpha))))
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.rows())


def cvgm_run(problem, data: Dataset, cfg: CvgmConfig, alpha0, test_set: Dataset | None = None,
             *, splits=None, callback=None):
    """Run projected gradient descent from ``alpha0``.

    Splits are drawn once (unless given) and reused at every iteration. The
    trace holds one record per evaluated iterate, including the last one, so
    ``max_iters`` updates give ``max_iters + 1`` records. ``test_set`` is
    only used for reporting through ``problem.evaluate``.
    """
    proj = cfg.projection or problem.projection
    if splits is None:
        splits = sample_splits(data.N, cfg.K, cfg.p, cfg.seed, cfg.stratified)
    alpha = np.array(alpha0, dtype=float)
    if np.max(np.abs(project(alpha, proj) - alpha), initial=0.0) > 1e-12:
        raise ValueError("alpha0 is outside the constraint set")
    trace = CvgmTrace()
    k = 0
    stop = False
    while True:
        loss, g = cv_loss_and_grad(problem, data, splits, alpha, n_jobs=cfg.n_jobs)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            raise DivergenceError(f"non-finite cross-validation loss or gradient at iteration {k}; "
                                  "try a smaller step size")
        metrics = problem.evaluate(alpha, data, test_set) if test_set is not None else {}
        rec = TraceRecord(k, alpha.copy(), loss, float(np.linalg.norm(g)), metrics)
        trace.records.append(rec)
        if callback is not None:
            callback(rec)
        if k >= cfg.max_iters or stop:
            break
        new = project(alpha - cfg.step_size * g, proj)
        stop = cfg.convergence_tol > 0 and np.max(np.abs(new - alpha)) <= cfg.convergence_tol
        alpha = new
        k += 1
    return alpha, trace
