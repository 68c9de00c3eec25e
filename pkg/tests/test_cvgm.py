import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvgrad.cvgm import (CvgmConfig, ElasticNetCV, KernelLogisticCV, LogisticCV,
                         LossCombinationCV, Projection, cv_loss_and_grad, cvgm_run, fold_terms,
                         project, project_simplex)
from cvgrad.dataset import Dataset, Split, make_regression, make_rings, sample_splits
from cvgrad.errors import DivergenceError, FoldError
from cvgrad.kernel import init_kernel
from cvgrad.learners import ElasticNetHyper, LogisticHyper, fit_elastic_net, fit_logistic
from oracles import cv_loss_double_loop, rel_err


@pytest.fixture(scope="module")
def regression():
    d, _ = make_regression(30, 10, 8, 100.0, seed=0)
    return d


def _classification(N=24, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, 3))
    y = np.where(X[:, 0] - 0.5 * X[:, 1] + 0.7 * rng.standard_normal(N) > 0, 1.0, -1.0)
    return Dataset(X, y, "classification")


# -- projections ------------------------------------------------------------

def test_box_projection():
    box = Projection("box", lo=(0.0, 1e-7))
    np.testing.assert_array_equal(project([0.3, 0.2], box), [0.3, 0.2])
    np.testing.assert_array_equal(project([-0.3, -5.0], box), [0.0, 1e-7])
    np.testing.assert_array_equal(project([2.0, 3.0], Projection("box", lo=(0, 0), hi=(1, 1))),
                                  [1.0, 1.0])
    np.testing.assert_array_equal(project([-4.0], Projection()), [-4.0])
    with pytest.raises(ValueError):
        Projection("ball")


def test_simplex_examples():
    np.testing.assert_allclose(project_simplex([2, 0, 0, 0]), [1, 0, 0, 0])
    np.testing.assert_allclose(project_simplex([0.5] * 4), [0.25] * 4)
    np.testing.assert_allclose(project_simplex([0.1, 0.2, 0.3, 0.4]), [0.1, 0.2, 0.3, 0.4])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_simplex_projection_kkt(v):
    v = np.array(v)
    x = project_simplex(v)
    assert np.all(x >= 0) and abs(x.sum() - 1) < 1e-12
    # positive entries are shifted by a common tau; zeroed entries sit below it
    pos = x > 0
    tau = np.mean(v[pos] - x[pos])
    np.testing.assert_allclose(v[pos] - x[pos], tau, atol=1e-12)
    assert np.all(v[~pos] <= tau + 1e-12)


# -- cross-validation loss and gradient -------------------------------------

def _enet_fit(alpha):
    def fit(X, y):
        mu, sd = X.mean(axis=0), X.std(axis=0)
        res = fit_elastic_net((X - mu) / sd, y - y.mean(), ElasticNetHyper(*alpha))
        return lambda x: ((x - mu) / sd) @ res.theta + y.mean()
    return fit


def test_cv_loss_matches_double_loop(regression):
    splits = sample_splits(regression.N, 16, 0.8, seed=1)
    alpha = (0.5, 0.01)
    loss, _ = cv_loss_and_grad(ElasticNetCV(), regression, splits, alpha)
    ref = cv_loss_double_loop(_enet_fit(alpha), lambda p, t: (p - t) ** 2,
                              regression.features, regression.targets, splits)
    assert abs(loss - ref) <= 1e-12 * abs(ref)


def test_logistic_cv_loss_matches_double_loop():
    d = _classification()
    splits = sample_splits(d.N, 8, 0.75, seed=2)

    def fit(X, y):
        theta = fit_logistic(X, y, LogisticHyper(2.0)).theta
        return lambda x: x @ theta

    ref = cv_loss_double_loop(fit, lambda p, t: np.logaddexp(0, -t * p), d.features, d.targets,
                              splits)
    loss, _ = cv_loss_and_grad(LogisticCV(), d, splits, [2.0])
    assert abs(loss - ref) <= 1e-12 * abs(ref)


def test_saturated_lambda1_single_point(regression):
    split = Split(np.arange(1, 30), np.array([0]))
    loss, grad = cv_loss_and_grad(ElasticNetCV(), regression, [split], [1e6, 1e-3])
    ybar = regression.targets[1:].mean()
    assert loss == pytest.approx((ybar - regression.targets[0]) ** 2, rel=1e-12)
    assert abs(grad[0]) < 1e-15


def test_duplicated_splits_idempotent(regression):
    splits = sample_splits(regression.N, 5, 0.9, seed=3)
    for s in splits:
        one = cv_loss_and_grad(ElasticNetCV(), regression, [s], [0.3, 0.02])
        many = cv_loss_and_grad(ElasticNetCV(), regression, [s] * 7, [0.3, 0.02])
        assert many[0] == pytest.approx(one[0], rel=1e-14)
        np.testing.assert_allclose(many[1], one[1], rtol=1e-14)


def test_gradient_is_fold_average(regression):
    splits = sample_splits(regression.N, 12, 0.9, seed=4)
    losses, grads = fold_terms(ElasticNetCV(), regression, splits, np.array([0.3, 0.02]))
    loss, grad = cv_loss_and_grad(ElasticNetCV(), regression, splits, [0.3, 0.02])
    assert abs(loss - losses.mean()) <= 1e-12 * abs(loss)
    np.testing.assert_allclose(grad, grads.mean(axis=0), rtol=1e-12)


def _directional_fd(problem, data, splits, alpha, d, step):
    f = lambda t: cv_loss_and_grad(problem, data, splits, alpha + t * d, want_grad=False)[0]
    return (f(step) - f(-step)) / (2 * step)


def test_elastic_net_cv_gradient_fd(regression):
    splits = sample_splits(regression.N, 16, 0.9, seed=5)
    alpha = np.array([0.8, 0.05])
    _, g = cv_loss_and_grad(ElasticNetCV(), regression, splits, alpha)
    for d in np.eye(2):
        fd = _directional_fd(ElasticNetCV(), regression, splits, alpha, d * alpha, 1e-4)
        assert rel_err(g @ (d * alpha), fd) < 1e-3


def test_logistic_cv_gradient_fd():
    d = _classification()
    splits = sample_splits(d.N, 8, 0.75, seed=6)
    _, g = cv_loss_and_grad(LogisticCV(), d, splits, [2.0])
    fd = _directional_fd(LogisticCV(), d, splits, np.array([2.0]), np.ones(1), 1e-5)
    assert rel_err(g[0], fd) < 1e-5


def test_loss_combination_cv_gradient_fd():
    d = _classification(N=12, seed=7)
    splits = sample_splits(d.N, 4, 0.75, seed=7)
    alpha = np.array([0.3, 0.2, 0.25, 0.25])
    _, g = cv_loss_and_grad(LossCombinationCV(), d, splits, alpha)
    direction = np.array([1.0, -1.0, 0.5, -0.5])
    fd = _directional_fd(LossCombinationCV(), d, splits, alpha, direction, 1e-5)
    assert rel_err(g @ direction, fd) < 1e-3


def test_kernel_cv_gradient_fd():
    d = make_rings(16, seed=8)
    splits = sample_splits(d.N, 4, 0.75, seed=8)
    prob = KernelLogisticCV("one_layer", C=10.0)
    alpha = init_kernel("one_layer", seed=8).to_vector()
    _, g = cv_loss_and_grad(prob, d, splits, alpha)
    rng = np.random.default_rng(8)
    for _ in range(3):
        direction = rng.standard_normal(alpha.size)
        fd = _directional_fd(prob, d, splits, alpha, direction, 1e-6)
        assert rel_err(g @ direction, fd) < 1e-4


def test_thread_pool_matches_serial(regression):
    splits = sample_splits(regression.N, 32, 0.95, seed=9)
    a = cv_loss_and_grad(ElasticNetCV(), regression, splits, [0.2, 0.01], n_jobs=1)
    b = cv_loss_and_grad(ElasticNetCV(), regression, splits, [0.2, 0.01], n_jobs=4)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


class _Failing:
    """Fails on any fold whose validation set contains row 0."""

    dim = 1
    projection = Projection()

    def fold_terms(self, data, splits, alpha, want_grad=True):
        for j, s in enumerate(splits):
            if 0 in s.val_idx:
                raise FoldError(j, RuntimeError("boom"))
        return np.zeros(len(splits)), np.zeros((len(splits), 1))


def test_fold_error_carries_global_index():
    d = Dataset(np.zeros((4, 1)), np.zeros(4))
    splits = [Split(np.array([0, 1, 2]), np.array([3]))] * 5 + [Split(np.array([1, 2, 3]),
                                                                      np.array([0]))]
    for n_jobs in (1, 3):
        with pytest.raises(FoldError) as info:
            cv_loss_and_grad(_Failing(), d, splits, [0.0], n_jobs=n_jobs)
        assert info.value.fold_index == 5


class _Exploding:
    dim = 1
    projection = Projection()

    def fold_terms(self, data, splits, alpha, want_grad=True):
        v = np.exp(alpha[0])
        return np.full(len(splits), v), np.full((len(splits), 1), -v)


def test_divergence_raises():
    d = Dataset(np.zeros((4, 1)), np.zeros(4))
    with np.errstate(over="ignore"), pytest.raises(DivergenceError):
        cvgm_run(_Exploding(), d, CvgmConfig(K=2, p=0.5, step_size=1e3, max_iters=5), [1.0])


# -- the loop ---------------------------------------------------------------

def test_zero_step_constant_trace(regression):
    cfg = CvgmConfig(K=8, p=0.9, step_size=0.0, max_iters=3)
    alpha, trace = cvgm_run(ElasticNetCV(), regression, cfg, [0.01, 1e-4])
    np.testing.assert_array_equal(alpha, [0.01, 1e-4])
    assert len(trace) == 4
    assert np.all(trace.cv_losses == trace.cv_losses[0])


def test_default_config_reduces_cv_loss(regression):
    cfg = CvgmConfig()
    assert (cfg.K, cfg.p, cfg.step_size, cfg.max_iters) == (128, 0.95, 2e-4, 100)
    alpha, trace = cvgm_run(ElasticNetCV(loss_scale=1e3), regression, cfg, [1e-2, 1e-4])
    assert len(trace) == 101
    assert trace.cv_losses[100] <= trace.cv_losses[0]
    assert alpha[0] >= 0 and alpha[1] >= 1e-7


def test_projection_floor_during_run(regression):
    cfg = CvgmConfig(K=8, p=0.9, step_size=1e6, max_iters=2)
    _, trace = cvgm_run(ElasticNetCV(), regression, cfg, [0.01, 1e-4])
    for r in trace.records:
        assert r.alpha[0] >= 0.0 and r.alpha[1] >= 1e-7


def test_alpha0_outside_set_rejected(regression):
    with pytest.raises(ValueError):
        cvgm_run(ElasticNetCV(), regression, CvgmConfig(K=2, max_iters=1), [-1.0, 1e-3])
    with pytest.raises(ValueError):
        cvgm_run(LossCombinationCV(), _classification(), CvgmConfig(K=2, max_iters=1),
                 [0.5, 0.5, 0.5, 0.0])


def test_config_validation():
    with pytest.raises(ValueError):
        CvgmConfig(K=0)
    with pytest.raises(ValueError):
        CvgmConfig(p=1.0)
    with pytest.raises(ValueError):
        CvgmConfig(step_size=-1.0)


def test_convergence_tol_stops_early(regression):
    cfg = CvgmConfig(K=8, p=0.9, step_size=0.0, max_iters=50, convergence_tol=1e-9)
    _, trace = cvgm_run(ElasticNetCV(), regression, cfg, [0.01, 1e-4])
    assert len(trace) == 2


def test_run_is_deterministic_and_test_set_is_report_only(regression):
    test, _ = make_regression(50, 10, 8, 100.0, seed=1)
    cfg = CvgmConfig(K=16, p=0.9, step_size=1e-4, max_iters=5, seed=3)
    a1, t1 = cvgm_run(ElasticNetCV(1e3), regression, cfg, [0.05, 1e-3], test_set=test)
    a2, t2 = cvgm_run(ElasticNetCV(1e3), regression, cfg, [0.05, 1e-3])
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(t1.cv_losses, t2.cv_losses)
    assert np.all(np.isfinite(t1.column("test_loss")))
    assert np.all(np.isnan(t2.column("test_loss")))


def test_trace_csv_columns(tmp_path, regression):
    cfg = CvgmConfig(K=4, p=0.9, step_size=1e-4, max_iters=2)
    _, trace = cvgm_run(ElasticNetCV(), regression, cfg, [0.05, 1e-3])
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter,cv_loss,grad_norm,test_loss,alpha0,alpha1"
    assert len(lines) == 4

    d = make_rings(12, seed=0)
    prob = KernelLogisticCV()
    alpha0 = init_kernel("one_layer", seed=0).to_vector()
    _, trace = cvgm_run(prob, d, CvgmConfig(K=2, p=0.75, step_size=0.1, max_iters=1), alpha0,
                        test_set=d)
    trace.to_csv(tmp_path / "k.csv")
    header = (tmp_path / "k.csv").read_text().splitlines()[0].split(",")
    assert header[-1] == "alpha_norm" and "test_accuracy" in header
