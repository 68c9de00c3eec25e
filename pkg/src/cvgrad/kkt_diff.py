"""Quadratic and smooth convex programs, and derivatives of their solutions.

The QP solver is a dense primal-dual interior-point method with Mehrotra
predictor-corrector steps, followed by an active-set polish (one equality
constrained KKT solve) so that returned solutions satisfy the KKT
conditions to near machine precision. The batched entry points operate on a
leading batch axis; the single-problem functions are thin wrappers.

Derivatives come from the implicit function theorem on the residual map

    g(v, lam, nu) = [Q v + q + G^T lam + A^T nu;  diag(lam) (G v - h);  A v - b]

so that ``dz = -(dg/dz)^{-1} (dg/dparam . dparam)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConvergenceError, DifferentiabilityError, ProblemError

KKT_REG = 1e-10
MAX_CONDITION = 1e14
ACCEPT_TOL = 1e-8


@dataclass(frozen=True)
class QpProblem:
    """minimize 1/2 v^T Q v + q^T v  subject to  G v <= h,  A v = b."""

    Q: np.ndarray
    q: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float, ndmin=2)
        q = np.array(self.q, dtype=float, ndmin=1)
        m = q.shape[0]
        G = np.zeros((0, m)) if self.G is None else np.array(self.G, dtype=float, ndmin=2)
        h = np.zeros(0) if self.h is None else np.array(self.h, dtype=float, ndmin=1)
        A = np.zeros((0, m)) if self.A is None else np.array(self.A, dtype=float, ndmin=2)
        b = np.zeros(0) if self.b is None else np.array(self.b, dtype=float, ndmin=1)
        if Q.shape != (m, m):
            raise ProblemError(f"Q has shape {Q.shape}, expected {(m, m)}")
        if G.shape[1] != m or h.shape != (G.shape[0],):
            raise ProblemError(f"inconsistent inequality shapes G={G.shape}, h={h.shape}")
        if A.shape[1] != m or b.shape != (A.shape[0],):
            raise ProblemError(f"inconsistent equality shapes A={A.shape}, b={b.shape}")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise ProblemError("Q is not symmetric")
        for name, val in zip("QqGhAb", (Q, q, G, h, A, b)):
            object.__setattr__(self, name, val)

    @property
    def m(self) -> int:
        return self.q.shape[0]

    @property
    def c(self) -> int:
        return self.h.shape[0]

    @property
    def e(self) -> int:
        return self.b.shape[0]

    def objective(self, v) -> float:
        return float(0.5 * v @ self.Q @ v + self.q @ v)


@dataclass(frozen=True)
class QpPerturbation:
    """A direction in QP coefficient space; ``None`` entries are zero."""

    dQ: np.ndarray | None = None
    dq: np.ndarray | None = None
    dG: np.ndarray | None = None
    dh: np.ndarray | None = None
    dA: np.ndarray | None = None
    db: np.ndarray | None = None


@dataclass(frozen=True)
class KktSolution:
    v_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    kkt_residual: float
    objective: float
    dual_objective: float
    iterations: int
    # (primal objective, dual function value, primal infeasibility) per iterate;
    # weak duality only binds once the iterate is primal feasible
    history: tuple = field(default=(), repr=False)


@dataclass
class BatchSolution:
    v: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    history: list = field(default_factory=list)


def _bt(M):
    return np.swapaxes(M, -1, -2)


def _mv(M, x):
    return np.einsum("...ij,...j->...i", M, x)


def kkt_residual_batch(Q, q, G, h, A, b, v, lam, nu) -> np.ndarray:
    """Infinity norm of [stationarity; complementarity; equality; inequality violation]."""
    Gv_h = _mv(G, v) - h
    parts = [
        _mv(Q, v) + q + _mv(_bt(G), lam) + _mv(_bt(A), nu),
        lam * Gv_h,
        _mv(A, v) - b,
        np.maximum(Gv_h, 0.0),
        np.maximum(-lam, 0.0),
    ]
    return np.max(np.abs(np.concatenate(parts, axis=-1)), axis=-1, initial=0.0)


def _dual_value(Q, q, G, h, A, b, v, lam, nu):
    # g(lam, nu) = L(v, lam, nu) - 1/2 rd^T Q^{-1} rd, exact for quadratic L
    rd = _mv(Q, v) + q + _mv(_bt(G), lam) + _mv(_bt(A), nu)
    lag = (0.5 * np.einsum("...i,...i->...", v, _mv(Q, v)) + np.einsum("...i,...i->...", q, v)
           + np.einsum("...i,...i->...", lam, _mv(G, v) - h)
           + np.einsum("...i,...i->...", nu, _mv(A, v) - b))
    corr = np.einsum("...i,...i->...", rd, np.linalg.solve(Q, rd[..., None])[..., 0])
    return lag - 0.5 * corr


def _max_step(x, dx):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dx < 0, -x / dx, np.inf)
    return np.minimum(1.0, np.min(ratio, axis=-1, initial=np.inf))


def check_positive_definite(Q, min_eig: float = 0.0) -> None:
    Q = np.asarray(Q)
    eye = np.eye(Q.shape[-1])
    try:
        np.linalg.cholesky(Q - min_eig * eye)
    except np.linalg.LinAlgError as exc:
        raise ProblemError(f"quadratic term is not positive definite (shift {min_eig})") from exc


def _polish(Q, q, G, h, A, b, v, lam, nu, s):
    """Solve the equality-constrained KKT system on the guessed active set."""
    B, m = q.shape
    c, e = h.shape[1], b.shape[1]
    act = (s < lam).astype(float)
    n_tot = m + c + e
    M = np.zeros((B, n_tot, n_tot))
    M[:, :m, :m] = Q
    M[:, :m, m:m + c] = _bt(G)
    M[:, :m, m + c:] = _bt(A)
    M[:, m:m + c, :m] = act[:, :, None] * G
    idx = np.arange(c)
    M[:, m + idx, m + idx] = 1.0 - act
    M[:, m + c:, :m] = A
    rhs = np.concatenate([-q, act * h, b], axis=1)
    try:
        z = np.linalg.solve(M, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return None
    vp, lp, np_ = z[:, :m], z[:, m:m + c], z[:, m + c:]
    lp = np.where(act > 0, np.maximum(lp, 0.0), 0.0)
    return vp, lp, np_


def solve_qp_batch(Q, q, G=None, h=None, A=None, b=None, *, tol: float = 1e-10,
                   max_iter: int = 100, polish: bool = True, record: bool = False,
                   min_eig: float = 0.0) -> BatchSolution:
    """Solve a batch of QPs sharing dimensions (leading axis = batch)."""
    Q = np.asarray(Q, dtype=float)
    q = np.asarray(q, dtype=float)
    B, m = q.shape
    G = np.zeros((B, 0, m)) if G is None else np.asarray(G, dtype=float)
    h = np.zeros((B, 0)) if h is None else np.asarray(h, dtype=float)
    A = np.zeros((B, 0, m)) if A is None else np.asarray(A, dtype=float)
    b = np.zeros((B, 0)) if b is None else np.asarray(b, dtype=float)
    c, e = h.shape[1], b.shape[1]
    check_positive_definite(Q, min_eig)
    # tolerances are absolute for unit-scale data and relative beyond it
    scale = np.ones(B)
    for arr in (Q, q, h, b):
        if arr.size:
            scale = np.maximum(scale, np.abs(arr).reshape(B, -1).max(axis=1))

    GT, AT = _bt(G), _bt(A)

    def reduced_solve(W, r1, r3):
        H = Q + GT @ (W[:, :, None] * G)
        Kmat = np.zeros((B, m + e, m + e))
        Kmat[:, :m, :m] = H
        Kmat[:, :m, m:] = AT
        Kmat[:, m:, :m] = A
        rhs = np.concatenate([r1, r3], axis=1)
        try:
            sol = np.linalg.solve(Kmat, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            # numerically singular late in the run (e.g. a direction held only
            # by a tiny diagonal repair): least squares per problem
            sol = np.empty_like(rhs)
            for i in range(B):
                if np.all(np.isfinite(Kmat[i])) and np.all(np.isfinite(rhs[i])):
                    sol[i] = np.linalg.lstsq(Kmat[i], rhs[i], rcond=None)[0]
                else:
                    sol[i] = np.nan
        return sol[:, :m], sol[:, m:]

    # initial point: least squares on the inequality residual, then shift positive
    v, nu = reduced_solve(np.ones((B, c)), -q + _mv(GT, h), b)
    z = _mv(G, v) - h
    top = np.max(z, axis=1, initial=-np.inf)[:, None]
    s = np.where(top < 0, -z, -z + 1.0 + top)
    bottom = np.max(-z, axis=1, initial=-np.inf)[:, None]
    lam = np.where(bottom < 0, z, z + 1.0 + bottom)

    done = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    history = []
    # ill-conditioned late steps can undo progress, so remember the best iterate
    best = [v, s, lam, nu]
    best_res = np.full(B, np.inf)
    for _ in range(max_iter):
        rd = _mv(Q, v) + q + _mv(GT, lam) + _mv(AT, nu)
        rp = _mv(G, v) + s - h
        re = _mv(A, v) - b
        resid = np.max(np.abs(np.concatenate([rd, lam * (rp - s), re, rp], axis=1)),
                       axis=1, initial=0.0)
        if record:
            obj = 0.5 * np.einsum("bi,bi->b", v, _mv(Q, v)) + np.einsum("bi,bi->b", q, v)
            infeas = np.max(np.concatenate([_mv(G, v) - h, np.abs(re)], axis=1), axis=1,
                            initial=0.0)
            history.append((obj.copy(), _dual_value(Q, q, G, h, A, b, v, lam, nu), infeas))
        improved = resid < best_res
        best_res = np.where(improved, resid, best_res)
        best = [np.where(improved[:, None], x, bx) for x, bx in zip((v, s, lam, nu), best)]
        done |= resid <= tol * scale
        if done.all():
            break
        live = ~done
        iters += live
        with np.errstate(all="ignore"):
            W = lam / s
            base = rd

            def direction(rc):
                # rc is the right side of lam*ds + s*dlam = rc
                r1 = -base - _mv(GT, (rc + lam * rp) / s)
                dv, dnu = reduced_solve(W, r1, -re)
                ds = -rp - _mv(G, dv)
                dlam = (rc - lam * ds) / s
                return dv, ds, dlam, dnu

            mu = np.sum(s * lam, axis=1) / max(c, 1)
            _, ds_a, dl_a, _ = direction(-s * lam)
            a_aff = np.minimum(_max_step(s, ds_a), _max_step(lam, dl_a))
            mu_aff = np.sum((s + a_aff[:, None] * ds_a) * (lam + a_aff[:, None] * dl_a),
                            axis=1) / max(c, 1)
            sigma = np.clip(mu_aff / mu, 0.0, 1.0) ** 3
            rc = -s * lam - ds_a * dl_a + (sigma * mu)[:, None]
            dv, ds, dlam, dnu = direction(rc)
            step = 0.99 * np.minimum(_max_step(s, ds), _max_step(lam, dlam))
            # a badly centred pair can block the corrected step; recentre instead
            short = live & ~(step > 0.1)
            if short.any():
                cv, cs, cl, cn = direction(-s * lam + mu[:, None])
                cstep = 0.99 * np.minimum(_max_step(s, cs), _max_step(lam, cl))
                take = short & (cstep > step)
                dv, ds, dlam, dnu = (np.where(take[:, None], y, x)
                                     for x, y in zip((dv, ds, dlam, dnu), (cv, cs, cl, cn)))
                step = np.where(take, cstep, step)
        bad = ~np.isfinite(step) | ~np.all(np.isfinite(dv), axis=1)
        step = np.where(live & ~bad, step, 0.0)[:, None]
        dv, ds, dlam, dnu = (np.nan_to_num(x) for x in (dv, ds, dlam, dnu))
        v = v + step * dv
        s = s + step * ds
        lam = lam + step * dlam
        nu = nu + step * dnu
        done |= bad | (step[:, 0] < 1e-14)

    v, s, lam, nu = best
    lam = np.maximum(lam, 0.0)
    residual = kkt_residual_batch(Q, q, G, h, A, b, v, lam, nu)
    if polish:
        out = _polish(Q, q, G, h, A, b, v, lam, nu, s)
        if out is not None:
            vp, lp, np_ = out
            rp_ = kkt_residual_batch(Q, q, G, h, A, b, vp, lp, np_)
            better = np.isfinite(rp_) & (rp_ <= residual)
            v = np.where(better[:, None], vp, v)
            lam = np.where(better[:, None], lp, lam)
            nu = np.where(better[:, None], np_, nu)
            residual = np.where(better, rp_, residual)
    converged = residual <= ACCEPT_TOL * scale
    return BatchSolution(v, lam, nu, residual, iters, converged, history)


def qp_solve(p: QpProblem, *, tol: float = 1e-10, max_iter: int = 100, polish: bool = True,
             min_eig: float = 0.0) -> KktSolution:
    """Solve one QP.

    Raises ConvergenceError if the KKT residual exceeds 1e-8 times the
    largest data magnitude (at least 1).
    """
    sol = solve_qp_batch(p.Q[None], p.q[None], p.G[None], p.h[None], p.A[None], p.b[None],
                         tol=tol, max_iter=max_iter, polish=polish, record=True, min_eig=min_eig)
    if not sol.converged[0]:
        raise ConvergenceError("interior-point method did not reach the KKT tolerance",
                               float(sol.residual[0]))
    v, lam, nu = sol.v[0], sol.lam[0], sol.nu[0]
    dual = float(_dual_value(p.Q, p.q, p.G, p.h, p.A, p.b, v, lam, nu))
    hist = tuple((float(o[0]), float(d[0]), float(f[0])) for o, d, f in sol.history)
    return KktSolution(v, lam, nu, float(sol.residual[0]), p.objective(v), dual,
                       int(sol.iterations[0]), hist)


def kkt_matrix_batch(Q, G, h, A, v, lam) -> np.ndarray:
    """Jacobian of the residual map g with respect to (v, lam, nu)."""
    B, m = v.shape
    c, e = G.shape[1], A.shape[1]
    n_tot = m + c + e
    M = np.zeros((B, n_tot, n_tot))
    M[:, :m, :m] = Q
    M[:, :m, m:m + c] = _bt(G)
    M[:, :m, m + c:] = _bt(A)
    M[:, m:m + c, :m] = lam[:, :, None] * G
    idx = np.arange(c)
    M[:, m + idx, m + idx] = _mv(G, v) - h
    M[:, m + c:, :m] = A
    return M


def kkt_solve_batch(M, rhs, reg: float = KKT_REG, max_condition: float = MAX_CONDITION):
    """Return ``-(M + reg I)^{-1} rhs`` after a condition-number guard.

    ``rhs`` has shape (B, n_tot, k). Raises DifferentiabilityError naming the
    first offending batch entry.
    """
    Mr = M + reg * np.eye(M.shape[-1])
    if M.shape[-1]:
        # judged on the unregularized system: the shift alone would cap the
        # condition of an exactly singular unit-scale matrix near 1e10
        sv = np.linalg.svd(M, compute_uv=False)
        cond = sv[:, 0] / np.maximum(sv[:, -1], np.finfo(float).tiny)
        bad = np.flatnonzero(~(cond <= max_condition))
        if bad.size:
            i = int(bad[0])
            err = DifferentiabilityError(
                f"KKT system singular for batch entry {i} (condition {cond[i]:.2e})",
                float(sv[i, -1]))
            err.batch_index = i
            raise err
    return -np.linalg.solve(Mr, rhs)


def perturbation_rhs(v, lam, nu, d: QpPerturbation) -> np.ndarray:
    """Directional derivative of g with respect to the QP data (single problem)."""
    m, c, e = v.shape[0], lam.shape[0], nu.shape[0]
    r1 = np.zeros(m)
    r2 = np.zeros(c)
    r3 = np.zeros(e)
    if d.dQ is not None:
        r1 += np.asarray(d.dQ) @ v
    if d.dq is not None:
        r1 += d.dq
    if d.dG is not None:
        r1 += np.asarray(d.dG).T @ lam
        r2 += lam * (np.asarray(d.dG) @ v)
    if d.dh is not None:
        r2 -= lam * np.asarray(d.dh)
    if d.dA is not None:
        r1 += np.asarray(d.dA).T @ nu
        r3 += np.asarray(d.dA) @ v
    if d.db is not None:
        r3 -= d.db
    return np.concatenate([r1, r2, r3])


def qp_jacobian(p: QpProblem, s: KktSolution, dparam: QpPerturbation) -> np.ndarray:
    """Directional derivative of the primal solution along ``dparam``."""
    M = kkt_matrix_batch(p.Q[None], p.G[None], p.h[None], p.A[None], s.v_star[None],
                         s.lambda_star[None])
    rhs = perturbation_rhs(s.v_star, s.lambda_star, s.nu_star, dparam)
    dz = kkt_solve_batch(M, rhs[None, :, None])[0, :, 0]
    return dz[:p.m]


def newton_unconstrained_diff(grad: Callable, hess: Callable, cross: Callable, theta0, *,
                              fun: Callable | None = None, tol: float = 1e-10,
                              max_iter: int = 100):
    """Newton's method on a smooth strictly convex function, plus d theta*/d alpha.

    Backtracking uses the Armijo rule on ``fun`` when given, otherwise on
    1/2 |grad|^2. ``tol`` is relative to the gradient at ``theta0`` (floored
    at 1), since rounding limits how small large-scale gradients can get. Returns ``(theta_star, jac)`` with
    ``jac = -hess(theta_star)^{-1} cross(theta_star)``.
    """
    theta = np.array(theta0, dtype=float)
    merit = fun if fun is not None else (lambda t: 0.5 * float(grad(t) @ grad(t)))
    tol = tol * max(1.0, float(np.max(np.abs(grad(theta)), initial=0.0)))
    for _ in range(max_iter):
        g = grad(theta)
        if np.max(np.abs(g), initial=0.0) <= tol:
            break
        try:
            L = np.linalg.cholesky(hess(theta))
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("Hessian is not positive definite",
                                   float(np.max(np.abs(g)))) from exc
        step = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        f0 = merit(theta)
        slope = g @ step if fun is not None else -2.0 * f0
        t = 1.0
        f1 = merit(theta + step)
        flat = (abs(f1 - f0) <= 1e-12 * max(1.0, abs(f0))
                and np.max(np.abs(grad(theta + step))) < np.max(np.abs(g)))
        # near the optimum f is flat to rounding; accept if the gradient shrinks
        while not flat and f1 > f0 + 1e-4 * t * slope:
            t *= 0.5
            f1 = merit(theta + t * step)
            if t < 1e-12:
                # at the level of rounding noise a full step is still the best bet
                if np.max(np.abs(grad(theta + step))) < np.max(np.abs(g)):
                    t = 1.0
                    break
                raise ConvergenceError("line search failed", float(np.max(np.abs(g))))
        theta = theta + t * step
    else:
        g = grad(theta)
        if np.max(np.abs(g)) > tol:
            raise ConvergenceError("Newton iteration limit reached", float(np.max(np.abs(g))))
    H = hess(theta)
    jac = -np.linalg.solve(H, np.atleast_2d(np.asarray(cross(theta), dtype=float).T).T)
    return theta, jac


@dataclass(frozen=True)
class SmoothProblem:
    """minimize f(v, alpha) subject to G v <= h, A v = b.

    ``grad``, ``hess`` and ``cross`` evaluate the gradient, Hessian and the
    mixed derivative d(grad_v f)/d alpha (shape m x k) at the fixed alpha.
    Optional ``dG`` (k, c, m), ``dh`` (c, k), ``dA`` (k, e, m), ``db`` (e, k)
    describe how the constraint data move with alpha. ``x0`` must satisfy the
    inequalities strictly.
    """

    grad: Callable
    hess: Callable
    cross: Callable
    x0: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    dG: np.ndarray | None = None
    dh: np.ndarray | None = None
    dA: np.ndarray | None = None
    db: np.ndarray | None = None


@dataclass(frozen=True)
class SmoothSolution:
    v_star: np.ndarray
    lambda_star: np.ndarray
    nu_star: np.ndarray
    kkt_residual: float
    jac: np.ndarray
    iterations: int


def _smooth_residual(pr, G, h, A, b, v, lam, nu):
    f = G @ v - h
    parts = [pr.grad(v) + G.T @ lam + A.T @ nu, lam * f, A @ v - b,
             np.maximum(f, 0.0), np.maximum(-lam, 0.0)]
    return float(np.max(np.abs(np.concatenate(parts)), initial=0.0))


def barrier_solve_diff(pr: SmoothProblem, *, tol: float = 1e-11, max_iter: int = 200):
    """Primal-dual interior point for a smooth objective with affine constraints.

    After the interior-point phase the active set is fixed and Newton's method
    is run on the resulting equality-constrained KKT system. The Jacobian of
    the primal solution with respect to alpha then comes from the full KKT
    system (stationarity, diag(lam) f, equality rows).
    """
    v = np.array(pr.x0, dtype=float)
    m = v.shape[0]
    G = np.zeros((0, m)) if pr.G is None else np.asarray(pr.G, dtype=float)
    h = np.zeros(0) if pr.h is None else np.asarray(pr.h, dtype=float)
    A = np.zeros((0, m)) if pr.A is None else np.asarray(pr.A, dtype=float)
    b = np.zeros(0) if pr.b is None else np.asarray(pr.b, dtype=float)
    c, e = h.shape[0], b.shape[0]
    f = G @ v - h
    if np.any(f >= 0):
        raise ValueError("starting point must satisfy the inequalities strictly")
    lam = np.minimum(1.0 / -f, 1e6) if c else np.zeros(0)
    nu = np.zeros(e)
    n_tot = m + c + e

    def residuals(v, lam, nu, t):
        f = G @ v - h
        return np.concatenate([pr.grad(v) + G.T @ lam + A.T @ nu,
                               -lam * f - 1.0 / t, A @ v - b])

    it = 0
    for it in range(1, max_iter + 1):
        f = G @ v - h
        gap = float(-f @ lam) if c else 0.0
        r_dual = pr.grad(v) + G.T @ lam + A.T @ nu
        r_pri = A @ v - b
        if (np.max(np.abs(r_dual)) <= tol and np.max(np.abs(r_pri), initial=0.0) <= tol
                and gap <= tol):
            break
        t = 10.0 * c / gap if c and gap > 0 else 1e12
        M = np.zeros((n_tot, n_tot))
        M[:m, :m] = pr.hess(v)
        M[:m, m:m + c] = G.T
        M[:m, m + c:] = A.T
        M[m:m + c, :m] = -lam[:, None] * G
        M[m:m + c, m:m + c] = np.diag(-f)
        M[m + c:, :m] = A
        r = residuals(v, lam, nu, t)
        try:
            d = np.linalg.solve(M, -r)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular Newton system", float(np.max(np.abs(r)))) from exc
        dv, dlam, dnu = d[:m], d[m:m + c], d[m + c:]
        s = 0.99 * float(_max_step(lam, dlam)) if c else 1.0
        while c and np.any(G @ (v + s * dv) - h >= 0):
            s *= 0.5
        norm0 = np.linalg.norm(r)
        while np.linalg.norm(residuals(v + s * dv, lam + s * dlam, nu + s * dnu, t)) > \
                (1 - 0.01 * s) * norm0:
            s *= 0.5
            if s < 1e-14:
                break
        if s < 1e-14:
            break
        v, lam, nu = v + s * dv, lam + s * dlam, nu + s * dnu

    resid = _smooth_residual(pr, G, h, A, b, v, lam, nu)
    if c:
        polished = _polish_smooth(pr, G, h, A, b, v, lam, nu)
        if polished is not None:
            pv, pl, pn = polished
            pres = _smooth_residual(pr, G, h, A, b, pv, pl, pn)
            if pres <= resid:
                v, lam, nu, resid = pv, pl, pn, pres
    if resid > 1e-7:
        raise ConvergenceError("barrier method did not reach the KKT tolerance", resid)

    Mz = np.zeros((n_tot, n_tot))
    Mz[:m, :m] = pr.hess(v)
    Mz[:m, m:m + c] = G.T
    Mz[:m, m + c:] = A.T
    Mz[m:m + c, :m] = lam[:, None] * G
    Mz[m:m + c, m:m + c] = np.diag(G @ v - h)
    Mz[m + c:, :m] = A
    cross = np.atleast_2d(np.asarray(pr.cross(v), dtype=float).T).T
    k = cross.shape[1]
    rhs = np.zeros((n_tot, k))
    rhs[:m] = cross
    if pr.dG is not None:
        dG = np.asarray(pr.dG)
        rhs[:m] += np.einsum("kcm,c->mk", dG, lam)
        rhs[m:m + c] += lam[:, None] * np.einsum("kcm,m->ck", dG, v)
    if pr.dh is not None:
        rhs[m:m + c] -= lam[:, None] * np.asarray(pr.dh)
    if pr.dA is not None:
        dA = np.asarray(pr.dA)
        rhs[:m] += np.einsum("kem,e->mk", dA, nu)
        rhs[m + c:] += np.einsum("kem,m->ek", dA, v)
    if pr.db is not None:
        rhs[m + c:] -= np.asarray(pr.db)
    dz = kkt_solve_batch(Mz[None], rhs[None])[0]
    return SmoothSolution(v, lam, nu, resid, dz[:m], it)


def _polish_smooth(pr, G, h, A, b, v, lam, nu, max_iter: int = 30):
    m, c, e = v.shape[0], lam.shape[0], nu.shape[0]
    act = (h - G @ v) < lam
    Ga = G[act]
    k = Ga.shape[0]
    la = lam[act].copy()
    for _ in range(max_iter):
        r = np.concatenate([pr.grad(v) + Ga.T @ la + A.T @ nu, Ga @ v - h[act], A @ v - b])
        if np.max(np.abs(r), initial=0.0) <= 1e-14:
            break
        M = np.zeros((m + k + e, m + k + e))
        M[:m, :m] = pr.hess(v)
        M[:m, m:m + k] = Ga.T
        M[:m, m + k:] = A.T
        M[m:m + k, :m] = Ga
        M[m + k:, :m] = A
        try:
            d = np.linalg.solve(M, -r)
        except np.linalg.LinAlgError:
            return None
        v, la, nu = v + d[:m], la + d[m:m + k], nu + d[m + k:]
    lam_full = np.zeros(c)
    lam_full[act] = np.maximum(la, 0.0)
    return v, lam_full, nu
