import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msmcalib._kernels import logistic_eval
from msmcalib.errors import (
    ConvergenceError,
    DataError,
    DegenerateVarianceError,
    RankDeficiencyError,
    SeparationWarning,
)
from msmcalib.glm import (
    fit_hetnormal,
    fit_logistic,
    hetnormal_scores,
    predict_hetnormal,
    predict_prob,
)


def loglik(X, y, beta):
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def test_intercept_half():
    fit = fit_logistic(np.ones((10, 1)), np.r_[np.ones(5), np.zeros(5)])
    assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("k, m", [(1, 4), (7, 10), (3, 50)])
def test_intercept_closed_form(k, m):
    y = np.r_[np.ones(k), np.zeros(m - k)]
    fit = fit_logistic(np.ones((m, 1)), y)
    assert fit.coefficients[0] == pytest.approx(np.log(k / (m - k)), abs=1e-10)


def test_grid_search_oracle():
    X = np.column_stack([np.ones(8), [-1.5, -1.0, -0.5, 0.0, 0.3, 0.8, 1.2, 2.0]])
    y = np.array([0, 0, 1, 0, 1, 0, 1, 1.0])

    def search(g0, g1):
        eta = g0[:, None, None] * X[:, 0] + g1[None, :, None] * X[:, 1]
        ll = np.sum(y * eta - np.logaddexp(0.0, eta), axis=2)
        k = np.unravel_index(np.argmax(ll), ll.shape)
        return ll[k], (float(g0[k[0]]), float(g1[k[1]]))

    # the log-likelihood is concave: a 1e-2 sweep of [-5, 5]^2 locates the
    # basin, then a 1e-3 sweep around it
    coarse = np.round(np.arange(-5.0, 5.0 + 5e-3, 1e-2), 2)
    _, (c0, c1) = search(coarse, coarse)
    fine = np.round(np.arange(-0.05, 0.05 + 5e-4, 1e-3), 3)
    best, arg = search(np.clip(c0 + fine, -5, 5), np.clip(c1 + fine, -5, 5))
    fit = fit_logistic(X, y)
    np.testing.assert_allclose(fit.coefficients, arg, atol=2e-3)
    assert loglik(X, y, fit.coefficients) >= best - 1e-12


def test_score_at_solution_and_weights():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.ones(300), rng.normal(size=(300, 2))])
    y = (rng.random(300) < 0.4).astype(float)
    w = rng.uniform(0, 2, 300)
    fit = fit_logistic(X, y, w)
    p = predict_prob(fit, X, fit.columns)
    assert np.max(np.abs(X.T @ (w * (y - p)))) <= 1e-10
    assert fit.converged and fit.max_abs_score <= 1e-10
    # integer prior weights equal row replication
    wi = rng.integers(0, 3, 300).astype(float)
    rep = np.repeat(np.arange(300), wi.astype(int))
    np.testing.assert_allclose(fit_logistic(X, y, wi).coefficients, fit_logistic(X[rep], y[rep]).coefficients, atol=1e-9)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 3))])
    y = (rng.random(50) < 0.5).astype(float)
    w = np.ones(50)
    h = 1e-6
    for _ in range(10):
        beta = rng.normal(size=4)
        _, score, info = logistic_eval(X, y, w, beta)
        fd = np.array([(loglik(X, y, beta + h * e) - loglik(X, y, beta - h * e)) / (2 * h) for e in np.eye(4)])
        np.testing.assert_allclose(score, fd, rtol=1e-5, atol=1e-7)
        fd_info = np.array(
            [-(logistic_eval(X, y, w, beta + h * e)[1] - logistic_eval(X, y, w, beta - h * e)[1]) / (2 * h) for e in np.eye(4)]
        )
        np.testing.assert_allclose(info, fd_info, rtol=1e-5, atol=1e-6)


def test_permutation_equivariance():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(200), rng.normal(size=(200, 3))])
    y = (rng.random(200) < 0.3).astype(float)
    perm = [2, 0, 3, 1]
    a = fit_logistic(X, y)
    b = fit_logistic(X[:, perm], y)
    np.testing.assert_allclose(b.coefficients, a.coefficients[perm], atol=1e-10)


def test_duplicate_and_dependent_columns():
    X = np.column_stack([np.ones(20), np.arange(20.0)])
    y = np.r_[np.zeros(10), np.ones(10)]
    y[[3, 15]] = 1 - y[[3, 15]]
    with pytest.raises(RankDeficiencyError, match="duplicate"):
        fit_logistic(np.column_stack([X, X[:, 1]]), y, columns=["1", "t", "t"])
    with pytest.raises(RankDeficiencyError) as err:
        fit_logistic(np.column_stack([X, 2 * X[:, 1] + 1]), y, columns=["one", "t", "t2"])
    assert set(err.value.dependent_columns) & {"one", "t", "t2"}


def test_separation_flagged_not_fatal():
    X = np.column_stack([np.ones(40), np.r_[np.zeros(20), np.ones(20)]])
    y = np.r_[np.zeros(20), np.ones(20)]
    y[0] = 1.0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_logistic(X, y, max_iter=60)
    assert fit.separated
    assert any(issubclass(w.category, SeparationWarning) for w in caught)


def test_nonconvergence_raises():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(100), rng.normal(size=100)])
    y = (rng.random(100) < 0.5).astype(float)
    with pytest.raises(ConvergenceError):
        fit_logistic(X, y, max_iter=1)


def test_bad_response():
    with pytest.raises(DataError):
        fit_logistic(np.ones((3, 1)), np.array([0.0, 2.0, 1.0]))


def test_predict_prob_closed_forms():
    from msmcalib.glm import LogisticFit

    fit0 = LogisticFit(np.zeros(2), ("a", "b"), True, 0, 0.0)
    assert np.all(predict_prob(fit0, np.ones((3, 2)), ("a", "b")) == 0.5)
    fit3 = LogisticFit(np.array([np.log(3.0)]), ("(Intercept)",), True, 0, 0.0)
    assert predict_prob(fit3, np.ones((1, 1)), ("(Intercept)",))[0] == pytest.approx(0.75, abs=1e-15)
    beta = np.array([0.3, -1.2])
    x = np.array([[1.0, 0.7]])
    fitb = LogisticFit(beta, ("a", "b"), True, 0, 0.0)
    assert predict_prob(fitb, x, ("a", "b"))[0] == pytest.approx(1 / (1 + np.exp(-(x @ beta)[0])), rel=1e-14)
    huge = LogisticFit(np.array([100.0]), ("a",), True, 0, 0.0)
    assert predict_prob(huge, np.ones((1, 1)), ("a",))[0] == 1 - 1e-12
    with pytest.raises(DataError, match="do not match"):
        predict_prob(fitb, x, ("b", "a"))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_score_zero_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(30, 120))
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ rng.normal(scale=0.5, size=3)))).astype(float)
    if y.min() == y.max():
        return
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        fit = fit_logistic(X, y)
    p = 1 / (1 + np.exp(-X @ fit.coefficients))
    assert np.max(np.abs(X.T @ (y - p))) <= 1e-9


# heteroscedastic normal


def test_hetnormal_homoscedastic_reduces_to_ols():
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(200), rng.normal(size=200)])
    a = X @ [1.0, 2.0] + rng.normal(scale=0.7, size=200)
    fit = fit_hetnormal(X, np.ones((200, 1)), a)
    ols = np.linalg.lstsq(X, a, rcond=None)[0]
    np.testing.assert_allclose(fit.mean_coefficients, ols, atol=1e-10)
    assert fit.logvar_coefficients[0] == pytest.approx(np.log(np.mean((a - X @ ols) ** 2)), abs=1e-10)


def test_hetnormal_zero_noise_degenerate():
    X = np.column_stack([np.ones(20), np.arange(20.0)])
    with pytest.raises(DegenerateVarianceError):
        fit_hetnormal(X, np.ones((20, 1)), X @ [1.5, -0.5])


def test_hetnormal_scores_zero_at_solution():
    rng = np.random.default_rng(6)
    X = np.column_stack([np.ones(500), rng.normal(size=500)])
    Z = np.column_stack([np.ones(500), rng.uniform(-1, 1, 500)])
    a = X @ [0.5, 1.0] + np.exp(0.5 * (Z @ [-0.3, 0.8])) * rng.normal(size=500)
    fit = fit_hetnormal(X, Z, a)
    s_mu, s_sig = hetnormal_scores(X, Z, a, fit.mean_coefficients, fit.logvar_coefficients)
    assert max(np.max(np.abs(s_mu)), np.max(np.abs(s_sig))) <= 1e-8
    mean, var = predict_hetnormal(fit, X, Z)
    assert np.all(var > 0)


def test_hetnormal_monte_carlo_recovers_truth():
    # 20 distinct design rows replicated to a large sample
    rng = np.random.default_rng(7)
    base_x = np.column_stack([np.ones(20), rng.normal(size=20)])
    base_z = np.column_stack([np.ones(20), rng.uniform(-1, 1, 20)])
    reps = 1000
    X, Z = np.tile(base_x, (reps, 1)), np.tile(base_z, (reps, 1))
    b_mu, b_sig = np.array([2.0, -1.0]), np.array([0.2, 0.9])
    var = np.exp(Z @ b_sig)
    a = X @ b_mu + np.sqrt(var) * rng.normal(size=X.shape[0])
    fit = fit_hetnormal(X, Z, a)
    se_mu = np.sqrt(np.diag(np.linalg.inv((X / var[:, None]).T @ X)))
    se_sig = np.sqrt(np.diag(np.linalg.inv(0.5 * Z.T @ Z)))
    assert np.all(np.abs(fit.mean_coefficients - b_mu) <= 3 * se_mu)
    assert np.all(np.abs(fit.logvar_coefficients - b_sig) <= 3 * se_sig)


def test_fit_serializes():
    fit = fit_logistic(np.ones((4, 1)), np.array([0, 1, 1, 0.0]), columns=["(Intercept)"])
    d = fit.to_dict()
    assert d["coefficients"] == {"(Intercept)": 0.0} and d["converged"]
