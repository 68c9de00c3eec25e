"""Grid and random search over the same cross-validation objective as CVGM."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .cvgm import cv_loss_and_grad
from .errors import CvgradError
from .kernel import init_kernel, kernel_backward, kernel_forward, KernelParams
from .learners import softmargin_derivative, softmargin_terms


@dataclass(frozen=True)
class SearchSpace:
    """Per-dimension log-scale intervals, with a grid resolution per dimension."""

    lo: tuple
    hi: tuple
    resolution: tuple | None = None

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be vectors of equal length")
        if np.any(lo <= 0) or np.any(hi < lo):
            raise ValueError("log-scale intervals need 0 < lo <= hi")
        if self.resolution is not None:
            if len(self.resolution) != lo.size or min(self.resolution) < 1:
                raise ValueError("need one positive grid resolution per dimension")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def grid(self) -> list[np.ndarray]:
        res = self.resolution or (10,) * self.dim
        axes = [np.geomspace(a, b, r) if r > 1 else np.array([a])
                for a, b, r in zip(self.lo, self.hi, res)]
        return [np.array(p) for p in itertools.product(*axes)]

    def sample(self, rng, count: int) -> list[np.ndarray]:
        llo, lhi = np.log(self.lo), np.log(self.hi)
        # exp(log(lo)) can round below lo
        return [np.clip(np.exp(rng.uniform(llo, lhi)), self.lo, self.hi) for _ in range(count)]


@dataclass
class EvalRecord:
    step: int
    alpha: np.ndarray
    cv_loss: float
    best_so_far: float


@dataclass
class EvalLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def best_index_at(self, step: int) -> int:
        """Index of the best point among the first ``step + 1`` evaluations."""
        losses = [r.cv_loss for r in self.records[:step + 1]]
        return int(np.argmin(losses))

    def to_csv(self, path) -> None:
        d = self.records[0].alpha.size if self.records else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", *[f"alpha{i}" for i in range(d)], "cv_loss", "best_so_far"])
            for r in self.records:
                w.writerow([r.step, *[repr(float(a)) for a in r.alpha], repr(r.cv_loss),
                            repr(r.best_so_far)])


def _evaluate_all(problem, data, splits, points, n_jobs=1):
    log = EvalLog()
    best = np.inf
    best_alpha = None
    for step, alpha in enumerate(points):
        try:
            loss, _ = cv_loss_and_grad(problem, data, splits, alpha, n_jobs=n_jobs,
                                       want_grad=False)
        except CvgradError:
            loss = np.inf
        if not np.isfinite(loss):
            loss = np.inf
        # strict improvement: ties go to the earliest point
        if loss < best or best_alpha is None:
            best, best_alpha = loss, alpha
        log.records.append(EvalRecord(step, np.asarray(alpha, dtype=float), float(loss),
                                      float(best)))
    return np.asarray(best_alpha, dtype=float), log


def grid_search(problem, data, splits, space: SearchSpace, budget: int, *, n_jobs: int = 1):
    """Evaluate every log-spaced grid point and keep the argmin."""
    points = space.grid()
    if len(points) > budget:
        raise ValueError(f"grid has {len(points)} points but the budget is {budget}")
    return _evaluate_all(problem, data, splits, points, n_jobs)


def random_search(problem, data, splits, space: SearchSpace, budget: int, seed=None, *,
                  n_jobs: int = 1):
    """Evaluate ``budget`` log-uniform samples and keep the argmin."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    points = space.sample(np.random.default_rng(seed), budget)
    return _evaluate_all(problem, data, splits, points, n_jobs)


@dataclass
class EndToEndNet:
    """A feature map followed by a bias-free linear output, trained jointly."""

    kernel: KernelParams
    head: np.ndarray

    def decision(self, X) -> np.ndarray:
        return kernel_forward(self.kernel, X)[0] @ self.head


def train_end_to_end(X, y, arch: str = "one_layer", step_size: float = 1e-2, steps: int = 100,
                     seed=None) -> tuple[EndToEndNet, np.ndarray]:
    """Full-batch gradient descent on mean binary cross-entropy (labels -1/+1).

    Uses the same feature map as the kernel-learning problem so the two differ
    only in how the map is trained. Returns the network and the training loss
    before every step.
    """
    rng = np.random.default_rng(seed)
    kp = init_kernel(arch, seed=rng.integers(1 << 31))
    out_dim = kp.dims[-1]
    bound = 1.0 / np.sqrt(out_dim)
    vec, head = kp.to_vector(), rng.uniform(-bound, bound, out_dim)
    y = np.asarray(y, dtype=float)
    losses = np.empty(steps)
    for k in range(steps):
        kp = KernelParams.from_vector(vec, kp.dims)
        V, tape = kernel_forward(kp, X)
        yhat = V @ head
        losses[k] = float(np.mean(softmargin_terms(yhat, y)))
        dyhat = softmargin_derivative(yhat, y) / len(y)
        g_head = V.T @ dyhat
        g_vec = kernel_backward(kp, tape, np.outer(dyhat, head)).to_vector()
        vec = vec - step_size * g_vec
        head = head - step_size * g_head
    return EndToEndNet(KernelParams.from_vector(vec, kp.dims), head), losses
