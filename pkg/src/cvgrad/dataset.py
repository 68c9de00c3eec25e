"""Synthetic data generators, feature normalization and split sampling.

All randomness goes through ``numpy.random.default_rng`` (PCG64), so every
generator is a pure function of its arguments and the seed.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

EPS_STD = 1e-12


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    task: str = "regression"

    def __post_init__(self):
        X = _frozen(self.features)
        y = _frozen(self.targets)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a nonempty N x n matrix, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError(f"targets shape {y.shape} does not match {X.shape[0]} examples")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite values")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("classification targets must be -1 or +1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.targets[idx], self.task)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{j}" for j in range(self.n)] + ["y"])
            for row, t in zip(self.features, self.targets):
                w.writerow([repr(float(v)) for v in row] + [repr(float(t))])

    @classmethod
    def from_csv(cls, path, task: str | None = None) -> Dataset:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[-1] != "y":
            raise ValueError(f"{path}: last column must be 'y'")
        data = np.array([[float(v) for v in r] for r in body], dtype=float)
        X, y = data[:, :-1], data[:, -1]
        if task is None:
            task = "classification" if np.all(np.isin(y, (-1.0, 1.0))) else "regression"
        return cls(X, y, task)


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "train_idx", _frozen(self.train_idx, int))
        object.__setattr__(self, "val_idx", _frozen(self.val_idx, int))


@dataclass(frozen=True)
class Normalizer:
    means: np.ndarray
    stds: np.ndarray

    def transform(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=float) - self.means) / self.stds
        # constant columns map to exactly zero, whatever the rounding in the mean
        Z[:, self.stds <= EPS_STD] = 0.0
        return Z


def fit_normalizer(d: Dataset | np.ndarray, idx=None) -> Normalizer:
    """Per-feature mean and population std over the rows in ``idx``."""
    X = d.features if isinstance(d, Dataset) else np.asarray(d, dtype=float)
    if idx is not None:
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ValueError("cannot fit a normalizer on an empty index set")
        X = X[idx]
    means = X.mean(axis=0)
    stds = np.maximum(X.std(axis=0), EPS_STD)
    return Normalizer(_frozen(means), _frozen(stds))


def apply_normalizer(nrm: Normalizer, d: Dataset) -> Dataset:
    return Dataset(nrm.transform(d.features), d.targets, d.task)


def make_regression(N: int, n: int, n_informative: int, noise_std: float, seed=None,
                    coef_scale: float = 100.0, coef=None) -> tuple[Dataset, np.ndarray]:
    """Linear-Gaussian regression data.

    Rows of X are standard normal. A random subset of ``n_informative``
    features gets a coefficient ``coef_scale * N(0, 1)``; the rest are exactly
    zero. Targets are ``X @ coef + noise_std * N(0, 1)``. Passing ``coef``
    reuses a ground truth (e.g. for a matching test set).
    """
    if N < 1 or n < 1 or not 0 <= n_informative <= n:
        raise ValueError(f"invalid sizes N={N}, n={n}, n_informative={n_informative}")
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, n))
    if coef is None:
        coef = np.zeros(n)
        informative = rng.permutation(n)[:n_informative]
        coef[informative] = coef_scale * rng.standard_normal(n_informative)
        # redraw the (measure-zero) case of an exact zero informative coefficient
        while np.any(coef[informative] == 0.0):
            coef[informative] = coef_scale * rng.standard_normal(n_informative)
    else:
        coef = np.array(coef, dtype=float)
        if coef.shape != (n,):
            raise ValueError(f"coef must have shape ({n},)")
    y = X @ coef
    if noise_std > 0:
        y = y + noise_std * rng.standard_normal(N)
    return Dataset(X, y, "regression"), coef


def make_rings(N: int, r1: float = 1.0, r2: float = 2.0, radial_std: float = 0.4,
               seed=None) -> Dataset:
    """Two concentric noisy rings; the ring at ``r1`` is labelled +1."""
    if N < 2 or N % 2:
        raise ValueError(f"N must be even and >= 2, got {N}")
    if radial_std <= 0:
        raise ValueError("radial_std must be positive")
    rng = np.random.default_rng(seed)
    half = N // 2
    labels = np.concatenate([np.ones(half), -np.ones(half)])
    centers = np.where(labels > 0, r1, r2)
    r = centers + radial_std * rng.standard_normal(N)
    angle = rng.uniform(-np.pi, np.pi, N)
    X = np.column_stack([r * np.cos(angle), r * np.sin(angle)])
    order = rng.permutation(N)
    return Dataset(X[order], labels[order], "classification")


def rings_bayes_rate(r1: float = 1.0, r2: float = 2.0, radial_std: float = 0.4) -> float:
    """Accuracy of thresholding the radius halfway between the rings."""
    half_gap = abs(r2 - r1) / 2
    return float(norm.cdf(half_gap / radial_std))


def rings_bayes_predict(X, r1: float = 1.0, r2: float = 2.0) -> np.ndarray:
    radius = np.linalg.norm(X, axis=1)
    inner = 1.0 if r1 < r2 else -1.0
    return np.where(radius < (r1 + r2) / 2, inner, -inner)


# (x_lo, x_hi, y_lo, y_hi)
XOR_POSITIVE_BOXES = ((-3.0, 0.6, -0.6, 3.0), (-0.6, 3.0, -3.0, 0.6))
XOR_NEGATIVE_BOXES = ((-3.0, 0.6, -3.0, 0.6), (-0.6, 3.0, -0.6, 3.0))


def _sample_boxes(rng, boxes, count) -> np.ndarray:
    boxes = np.asarray(boxes)
    pick = boxes[rng.integers(0, len(boxes), count)]
    u = rng.uniform(size=(count, 2))
    return np.column_stack([
        pick[:, 0] + u[:, 0] * (pick[:, 1] - pick[:, 0]),
        pick[:, 2] + u[:, 1] * (pick[:, 3] - pick[:, 2]),
    ])


def make_xor(N: int, seed=None) -> Dataset:
    """Overlapping two-box XOR; each class picks one of its boxes with probability 1/2."""
    if N < 2 or N % 2:
        raise ValueError(f"N must be even and >= 2, got {N}")
    rng = np.random.default_rng(seed)
    half = N // 2
    X = np.vstack([_sample_boxes(rng, XOR_POSITIVE_BOXES, half),
                   _sample_boxes(rng, XOR_NEGATIVE_BOXES, half)])
    y = np.concatenate([np.ones(half), -np.ones(half)])
    order = rng.permutation(N)
    return Dataset(X[order], y[order], "classification")


def _box_mixture_density(boxes, x, y) -> float:
    inside = [(a <= x <= b) and (c <= y <= d) for a, b, c, d in boxes]
    return sum(w / ((b - a) * (d - c)) for w, (a, b, c, d) in zip(inside, boxes)) / len(boxes)


def box_mixture_bayes_accuracy(pos_boxes, neg_boxes) -> float:
    """Exact Bayes accuracy for two equiprobable classes of uniform-box mixtures.

    The densities are piecewise constant on the grid spanned by all box
    edges, so the integral of ``max(p+, p-) / 2`` is a finite sum over cells.
    """
    xs = sorted({v for bx in (*pos_boxes, *neg_boxes) for v in bx[:2]})
    ys = sorted({v for bx in (*pos_boxes, *neg_boxes) for v in bx[2:]})
    total = 0.0
    for (x0, x1), (y0, y1) in itertools.product(zip(xs, xs[1:]), zip(ys, ys[1:])):
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        p = _box_mixture_density(pos_boxes, cx, cy)
        q = _box_mixture_density(neg_boxes, cx, cy)
        total += 0.5 * max(p, q) * (x1 - x0) * (y1 - y0)
    return total


def xor_bayes_accuracy() -> float:
    return box_mixture_bayes_accuracy(XOR_POSITIVE_BOXES, XOR_NEGATIVE_BOXES)


def xor_bayes_predict(X) -> np.ndarray:
    X = np.asarray(X)
    return np.where(X[:, 0] * X[:, 1] < 0, 1.0, -1.0)


def sample_splits(N: int, K: int, p: float, seed=None, stratified: bool = False) -> list[Split]:
    """Draw ``K`` train/validation splits with ``floor(p * N)`` training rows each.

    By default every split is an independent uniformly random subset. With
    ``stratified=True`` the validation sets are cut from a stream of
    concatenated random permutations, so every index is held out the same
    number of times (up to one).
    """
    n_train = int(np.floor(p * N))
    if K < 1:
        raise ValueError("K must be at least 1")
    if not 1 <= n_train <= N - 1:
        raise ValueError(f"floor(p*N) = {n_train} leaves an empty train or validation side (N={N})")
    rng = np.random.default_rng(seed)
    all_idx = np.arange(N)
    splits = []
    if stratified:
        n_val = N - n_train
        remaining: list[int] = []
        for _ in range(K):
            val = remaining[:n_val]
            remaining = remaining[n_val:]
            if len(val) < n_val:
                fresh = rng.permutation(N).tolist()
                taken = set(val)
                extra = [i for i in fresh if i not in taken][:n_val - len(val)]
                chosen = set(extra)
                val += extra
                remaining = [i for i in fresh if i not in chosen]
            val = np.sort(np.array(val))
            splits.append(Split(np.setdiff1d(all_idx, val), val))
        return splits
    for _ in range(K):
        perm = rng.permutation(N)
        splits.append(Split(np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return splits
