"""Convex learners that return their fitted parameters and d(theta)/d(hyperparameters).

Each ``fit_*`` function solves its training problem and differentiates the
solution through the optimality conditions. The ``*_batch`` variants solve
many same-sized problems at once (one per cross-validation fold) and are what
the cross-validation pipeline calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError
from .kkt_diff import (SmoothProblem, barrier_solve_diff, kkt_matrix_batch, kkt_solve_batch,
                       newton_unconstrained_diff, solve_qp_batch)

LAMBDA2_FLOOR = 1e-7
SVM_REPAIR = 1e-9


@dataclass(frozen=True)
class FitResult:
    theta: np.ndarray
    jac_hyper: np.ndarray
    intercept: float = 0.0
    jac_inputs: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ElasticNetHyper:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ValueError("hyperparameters must be finite")
        if self.lambda1 < 0:
            raise ValueError(f"lambda1 must be >= 0, got {self.lambda1}")
        if self.lambda2 < LAMBDA2_FLOOR:
            raise ValueError(f"lambda2 must be >= {LAMBDA2_FLOOR}, got {self.lambda2}")


class SvmHyper(ElasticNetHyper):
    pass


@dataclass(frozen=True)
class LogisticHyper:
    C: float

    def __post_init__(self):
        if not (np.isfinite(self.C) and self.C > 0):
            raise ValueError(f"C must be finite and positive, got {self.C}")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the hinge, exponential, truncated-quadratic and logistic losses."""

    alpha: tuple

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        if a.shape != (4,) or np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
            raise ValueError(f"loss weights must lie on the 4-simplex, got {self.alpha}")
        object.__setattr__(self, "alpha", tuple(float(x) for x in a))


# -- prediction and evaluation losses ---------------------------------------

def predict(theta, intercept, X) -> np.ndarray:
    return np.asarray(X) @ np.asarray(theta) + intercept


def loss_regression(yhat, y) -> float:
    return float(np.mean((np.asarray(yhat) - y) ** 2))


def softmargin_terms(yhat, y) -> np.ndarray:
    m = np.asarray(y) * np.asarray(yhat)
    return np.log1p(np.exp(-np.abs(m))) + np.maximum(-m, 0.0)


def loss_softmargin(yhat, y) -> float:
    return float(np.mean(softmargin_terms(yhat, y)))


def softmargin_derivative(yhat, y) -> np.ndarray:
    """Per-example derivative of log(1 + exp(-y yhat)) with respect to yhat."""
    y = np.asarray(y)
    return -y * expit(-y * np.asarray(yhat))


def loss_01(yhat, y) -> float:
    labels = np.where(np.asarray(yhat) > 0, 1.0, -1.0)
    return float(np.mean(labels != np.asarray(y)))


def accuracy(yhat, y) -> float:
    return 1.0 - loss_01(yhat, y)


# -- logistic regression -----------------------------------------------------

def _logistic_parts(X, y, C, theta):
    pi = expit(y * (X @ theta))
    grad = theta + C * X.T @ ((pi - 1.0) * y)
    hess = np.eye(X.shape[1]) + C * (X.T * (pi * (1 - pi))) @ X
    return pi, grad, hess


def fit_logistic(X, y, h: LogisticHyper, want_input_jac: bool = False) -> FitResult:
    """L2-regularized logistic regression, 1/2 |theta|^2 + C sum log(1 + exp(-y x^T theta))."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    C = h.C

    def fun(theta):
        return 0.5 * theta @ theta + C * np.sum(np.logaddexp(0.0, -y * (X @ theta)))

    def grad(theta):
        return _logistic_parts(X, y, C, theta)[1]

    def hess(theta):
        return _logistic_parts(X, y, C, theta)[2]

    def cross(theta):
        pi = expit(y * (X @ theta))
        return (X.T @ ((pi - 1.0) * y))[:, None]

    theta, jac = newton_unconstrained_diff(grad, hess, cross, np.zeros(X.shape[1]), fun=fun)
    pi, g, H = _logistic_parts(X, y, C, theta)
    jac_inputs = None
    if want_input_jac:
        jac_inputs = logistic_input_jacobian(X, y, C, theta, H)
    return FitResult(theta, jac, 0.0, jac_inputs,
                     {"residual": float(np.max(np.abs(g))), "hessian": H})


def logistic_input_jacobian(X, y, C, theta, H=None) -> np.ndarray:
    """d theta*/d x_i for every training row, shape (N, n, n).

    The mixed derivative of the gradient with respect to x_i is
    C[(pi_i - 1) y_i I + pi_i (1 - pi_i) x_i theta^T]; the second term comes
    from pi_i depending on x_i.
    """
    pi = expit(y * (X @ theta))
    n = X.shape[1]
    if H is None:
        H = np.eye(n) + C * (X.T * (pi * (1 - pi))) @ X
    cross = C * (((pi - 1.0) * y)[:, None, None] * np.eye(n)
                 + (pi * (1 - pi))[:, None, None] * np.einsum("ia,b->iab", X, theta))
    return -np.linalg.solve(H[None], cross)


def logistic_batch(V, y, C, *, tol: float = 1e-10, max_iter: int = 100):
    """Newton's method on K logistic problems at once.

    ``V`` has shape (K, M, d) and ``y`` (K, M). Returns ``(theta, H, pi,
    converged)`` with the Hessian and probabilities at the solution.
    """
    V = np.asarray(V, dtype=float)
    y = np.asarray(y, dtype=float)
    K, M, d = V.shape
    eye = np.eye(d)

    def parts(theta):
        margin = y * np.einsum("kmd,kd->km", V, theta)
        pi = expit(margin)
        f = 0.5 * np.sum(theta ** 2, axis=1) + C * np.sum(np.logaddexp(0.0, -margin), axis=1)
        g = theta + C * np.einsum("kmd,km->kd", V, (pi - 1.0) * y)
        return f, g, pi

    theta = np.zeros((K, d))
    f, g, pi = parts(theta)
    tol = tol * np.maximum(1.0, np.max(np.abs(g), axis=1))
    for _ in range(max_iter):
        live = np.max(np.abs(g), axis=1) > tol
        if not live.any():
            break
        H = eye + C * np.einsum("kmd,km,kme->kde", V, pi * (1 - pi), V)
        step = -np.linalg.solve(H, g[..., None])[..., 0]
        step[~live] = 0.0
        slope = np.sum(g * step, axis=1)
        t = np.ones(K)
        for _ in range(60):
            f_new, g_new, pi_new = parts(theta + t[:, None] * step)
            bad = live & (f_new > f + 1e-4 * t * slope)
            if not bad.any():
                break
            # near the optimum f is flat to rounding; accept if the gradient shrinks
            flat = bad & (np.max(np.abs(g_new), axis=1) < np.max(np.abs(g), axis=1)) & (t == 1.0) \
                & (np.abs(f_new - f) <= 1e-12 * np.maximum(1.0, np.abs(f)))
            bad &= ~flat
            if not bad.any():
                break
            t[bad] *= 0.5
        theta = theta + t[:, None] * step
        f, g, pi = parts(theta)
    converged = np.max(np.abs(g), axis=1) <= tol
    H = eye + C * np.einsum("kmd,km,kme->kde", V, pi * (1 - pi), V)
    return theta, H, pi, converged


# -- elastic net -------------------------------------------------------------

def elastic_net_qp(X, y, lambda1, lambda2):
    """Lifted QP data (Q, q) in v = [theta_p; theta_n] for a batch (K, M, n)."""
    X = np.asarray(X, dtype=float)
    K, M, n = X.shape
    S = np.einsum("kmi,kmj->kij", X, X) / M
    r = np.einsum("kmi,km->ki", X, y) / M
    eye = np.eye(n)
    Q = np.empty((K, 2 * n, 2 * n))
    Q[:, :n, :n] = S + lambda2 * eye
    Q[:, n:, n:] = S + lambda2 * eye
    Q[:, :n, n:] = -S
    Q[:, n:, :n] = -S
    q = np.concatenate([-r + lambda1, r + lambda1], axis=1)
    return Q, q


def elastic_net_batch(X, y, lambda1: float, lambda2: float, want_jac: bool = True):
    """Elastic net on K same-sized training sets.

    Returns ``(theta (K, n), jac (K, n, 2) or None, solution)`` where the
    Jacobian columns are d theta/d lambda1 and d theta/d lambda2.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    K, M, n = X.shape
    Q, q = elastic_net_qp(X, y, lambda1, lambda2)
    G = np.broadcast_to(-np.eye(2 * n), (K, 2 * n, 2 * n))
    h = np.zeros((K, 2 * n))
    sol = solve_qp_batch(Q, q, G, h)
    theta = sol.v[:, :n] - sol.v[:, n:]
    jac = None
    if want_jac:
        Mk = kkt_matrix_batch(Q, G, h, np.zeros((K, 0, 2 * n)), sol.v, sol.lam)
        rhs = np.zeros((K, 4 * n, 2))
        rhs[:, :2 * n, 0] = 1.0           # d q / d lambda1
        rhs[:, :2 * n, 1] = sol.v         # (d Q / d lambda2) v = v
        dz = kkt_solve_batch(Mk, rhs)
        jac = dz[:, :n, :] - dz[:, n:2 * n, :]
    return theta, jac, sol


def elastic_net_objective(X, y, theta, lambda1, lambda2) -> float:
    N = len(y)
    return float(np.sum((X @ theta - y) ** 2) / (2 * N) + lambda1 * np.abs(theta).sum()
                 + 0.5 * lambda2 * theta @ theta)


def fit_elastic_net(X, y, h: ElasticNetHyper, fit_intercept: bool = False) -> FitResult:
    """(1/2N)|X theta - y|^2 + lambda1 |theta|_1 + (lambda2/2)|theta|^2 via the lifted QP.

    With ``fit_intercept`` the intercept is the mean of y (least squares on a
    constant), subtracted before the fit and held constant in the Jacobian.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    intercept = float(y.mean()) if fit_intercept else 0.0
    theta, jac, sol = elastic_net_batch(X[None], (y - intercept)[None], h.lambda1, h.lambda2)
    if not sol.converged[0]:
        raise ConvergenceError("elastic-net QP failed", float(sol.residual[0]))
    diag = {"residual": float(sol.residual[0]), "iterations": int(sol.iterations[0]),
            "objective": elastic_net_objective(X, y - intercept, theta[0], h.lambda1, h.lambda2)}
    return FitResult(theta[0], jac[0], intercept, None, diag)


# -- support vector machine --------------------------------------------------

def svm_qp(X, y, lambda1, lambda2):
    """QP data over v = [theta_p; theta_n; t] with the small diagonal repair."""
    X = np.asarray(X, dtype=float)
    N, n = X.shape
    m = 2 * n + N
    block = np.block([[np.eye(n), -np.eye(n)], [-np.eye(n), np.eye(n)]])
    dQ2 = np.zeros((m, m))
    dQ2[:2 * n, :2 * n] = block
    Q = lambda2 * dQ2 + SVM_REPAIR * np.eye(m)
    q = np.concatenate([np.full(2 * n, lambda1), np.full(N, 1.0 / N)])
    yX = y[:, None] * X
    G = np.zeros((m + N, m))
    G[:m, :] = -np.eye(m)
    G[m:, :n] = -yX
    G[m:, n:2 * n] = yX
    G[m:, 2 * n:] = -np.eye(N)
    h = np.concatenate([np.zeros(m), -np.ones(N)])
    return Q, q, G, h, dQ2


def svm_objective(X, y, theta, lambda1, lambda2) -> float:
    hinge = np.maximum(0.0, 1.0 - y * (X @ theta))
    return float(hinge.mean() + lambda1 * np.abs(theta).sum() + 0.5 * lambda2 * theta @ theta)


def fit_svm(X, y, h: SvmHyper) -> FitResult:
    """l1/l2-regularized linear SVM with hinge slacks as explicit variables."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    N, n = X.shape
    Q, q, G, h_, dQ2 = svm_qp(X, y, h.lambda1, h.lambda2)
    sol = solve_qp_batch(Q[None], q[None], G[None], h_[None])
    if not sol.converged[0]:
        raise ConvergenceError("SVM QP failed", float(sol.residual[0]))
    v, lam = sol.v[0], sol.lam[0]
    theta = v[:n] - v[n:2 * n]
    Mk = kkt_matrix_batch(Q[None], G[None], h_[None], np.zeros((1, 0, len(v))), sol.v, sol.lam)
    rhs = np.zeros((1, len(v) + len(lam), 2))
    rhs[0, :2 * n, 0] = 1.0
    rhs[0, :len(v), 1] = dQ2 @ v
    dz = kkt_solve_batch(Mk, rhs)[0]
    jac = dz[:n] - dz[n:2 * n]
    diag = {"residual": float(sol.residual[0]), "iterations": int(sol.iterations[0]),
            "objective": svm_objective(X, y, theta, h.lambda1, h.lambda2),
            "repair_delta": float(0.5 * SVM_REPAIR * v @ v)}
    return FitResult(theta, jac, 0.0, None, diag)


# -- convex combination of surrogate losses ----------------------------------

def loss_combination_objective(X, y, theta, w, ridge) -> float:
    a = np.asarray(w.alpha if isinstance(w, LossWeights) else w)
    m = y * (X @ theta)
    terms = (a[0] * np.maximum(0.0, 1 - m) + a[1] * np.exp(-m)
             + a[2] * np.maximum(1 - m, 0.0) ** 2 + a[3] * np.logaddexp(0.0, -2 * m))
    return float(terms.mean() + 0.5 * ridge * theta @ theta)


def fit_loss_combination(X, y, w: LossWeights, ridge: float = 1.0) -> FitResult:
    """Ridge-regularized convex combination of four margin losses.

    The hinge part is carried by slack variables t (with the same tiny
    diagonal repair as the SVM), the other three enter the objective
    directly. Jacobian columns are d theta/d alpha_k for k = 1..4.
    """
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    N, n = X.shape
    a = np.asarray(w.alpha)
    yX = y[:, None] * X

    def split(v):
        theta, t = v[:n], v[n:]
        return theta, t, yX @ theta

    def grad(v):
        theta, t, m = split(v)
        coef = -a[1] * np.exp(-m) - 2 * a[2] * np.maximum(1 - m, 0.0) - 2 * a[3] * expit(-2 * m)
        return np.concatenate([yX.T @ coef / N + ridge * theta, a[0] / N + SVM_REPAIR * t])

    def hess(v):
        theta, t, m = split(v)
        curv = a[1] * np.exp(-m) + 2 * a[2] * (m < 1) + 4 * a[3] * expit(2 * m) * expit(-2 * m)
        H = np.zeros((n + N, n + N))
        H[:n, :n] = (yX.T * curv) @ yX / N + ridge * np.eye(n)
        H[n:, n:] = SVM_REPAIR * np.eye(N)
        return H

    def cross(v):
        theta, t, m = split(v)
        out = np.zeros((n + N, 4))
        out[n:, 0] = 1.0 / N
        out[:n, 1] = yX.T @ (-np.exp(-m)) / N
        out[:n, 2] = yX.T @ (-2 * np.maximum(1 - m, 0.0)) / N
        out[:n, 3] = yX.T @ (-2 * expit(-2 * m)) / N
        return out

    G = np.zeros((2 * N, n + N))
    G[:N, :n] = -yX
    G[:N, n:] = -np.eye(N)
    G[N:, n:] = -np.eye(N)
    h = np.concatenate([-np.ones(N), np.zeros(N)])
    x0 = np.concatenate([np.zeros(n), np.full(N, 2.0)])
    sol = barrier_solve_diff(SmoothProblem(grad, hess, cross, x0, G, h))
    theta = sol.v_star[:n]
    diag = {"residual": sol.kkt_residual, "iterations": sol.iterations,
            "objective": loss_combination_objective(X, y, theta, a, ridge)}
    return FitResult(theta, sol.jac[:n], 0.0, None, diag)
