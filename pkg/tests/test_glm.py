import numpy as np
import pytest
from scipy.special import expit

from peeriv import ConvergenceError, SeparationError, SingularSystemError, fit_logistic, fit_ols
from peeriv.glm import (_standardize, cv_lambda, fit_lasso_ols, lasso_lambda_max, logistic_loglik,
                        logistic_score)


def _design(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def test_balanced_intercept_only():
    y = np.array([0, 1] * 50)
    coef = fit_logistic(np.ones((100, 1)), y)
    np.testing.assert_allclose(coef, [0.0], atol=1e-12)
    assert expit(coef[0]) == pytest.approx(0.5)


def test_recovers_instrument_model_within_three_se():
    g = np.random.default_rng(12345)
    X = g.uniform(-1, 1, size=(10000, 2))
    y = (g.random(10000) < expit(0.25 * X[:, 0] + 0.25 * X[:, 1])).astype(float)
    D = _design(X)
    coef = fit_logistic(D, y)
    p = expit(D @ coef)
    cov = np.linalg.inv((D * (p * (1 - p))[:, None]).T @ D)
    se = np.sqrt(np.diag(cov))
    assert np.all(np.abs(coef - [0.0, 0.25, 0.25]) < 3 * se)


def test_score_at_mle_below_tolerance():
    g = np.random.default_rng(7)
    X = g.normal(size=(2000, 3))
    y = (g.random(2000) < expit(0.3 + X @ [0.5, -1.0, 0.2])).astype(float)
    coef, info = fit_logistic(_design(X), y, return_info=True)
    assert info["converged"]
    assert np.linalg.norm(logistic_score(coef, _design(X), y)) <= 1e-10


def test_weighted_fit_matches_replicated_rows():
    g = np.random.default_rng(3)
    X = g.normal(size=(300, 1))
    y = (g.random(300) < expit(X[:, 0])).astype(float)
    w = g.integers(1, 4, size=300).astype(float)
    rep = np.repeat(np.arange(300), w.astype(int))
    a = fit_logistic(_design(X), y, weights=w)
    b = fit_logistic(_design(X[rep]), y[rep])
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_separation_detected():
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError) as err:
        fit_logistic(_design(x[:, None]), y)
    assert err.value.last_iterate is not None


def test_non_convergence_carries_last_iterate():
    g = np.random.default_rng(5)
    X = g.normal(size=(500, 2))
    y = (g.random(500) < expit(X @ [1.0, -1.0])).astype(float)
    with pytest.raises(ConvergenceError) as err:
        fit_logistic(_design(X), y, max_iter=1, tol=1e-14)
    assert err.value.last_iterate.shape == (3,)


def test_rank_deficient_logistic_raises():
    g = np.random.default_rng(2)
    x = g.normal(size=200)
    y = (g.random(200) < 0.5).astype(float)
    with pytest.raises(SingularSystemError):
        fit_logistic(np.column_stack([np.ones(200), x, 2 * x]), y)


def test_lasso_saturation_zeroes_slopes():
    g = np.random.default_rng(9)
    X = g.normal(size=(400, 3))
    y = (g.random(400) < expit(X @ [1.0, 0.5, 0.0])).astype(float)
    lmax = lasso_lambda_max(_design(X), y)
    coef = fit_logistic(_design(X), y, penalty=lmax * 1.0001)
    assert np.all(coef[1:] == 0.0)
    assert expit(coef[0]) == pytest.approx(y.mean(), abs=1e-9)
    coef_small = fit_logistic(_design(X), y, penalty=lmax * 0.5)
    assert np.any(coef_small[1:] != 0.0)


def test_lasso_logistic_matches_sklearn():
    sk = pytest.importorskip("sklearn.linear_model")
    g = np.random.default_rng(21)
    X = g.normal(size=(500, 4))
    y = (g.random(500) < expit(0.2 + X @ [1.0, -0.7, 0.0, 0.1])).astype(float)
    lam = 0.02
    coef = fit_logistic(_design(X), y, penalty=lam, tol=1e-12)
    Z, centre, scale = _standardize(_design(X), np.ones(500))
    ref = sk.LogisticRegression(penalty="l1", C=1.0 / (500 * lam), solver="saga", tol=1e-12,
                                max_iter=200000).fit(Z, y)
    b_ref = ref.coef_.ravel() / scale
    a_ref = ref.intercept_[0] - centre @ b_ref
    np.testing.assert_allclose(coef, np.r_[a_ref, b_ref], atol=1e-5)


def test_lasso_logistic_kkt():
    g = np.random.default_rng(22)
    X = g.normal(size=(600, 5))
    y = (g.random(600) < expit(X @ [1.0, -0.5, 0.0, 0.0, 0.3])).astype(float)
    lam = 0.03
    coef = fit_logistic(_design(X), y, penalty=lam, tol=1e-12)
    Z, centre, scale = _standardize(_design(X), np.ones(600))
    b = coef[1:] * scale
    r = y - expit(_design(X) @ coef)
    grad = Z.T @ r / 600
    assert abs(r.mean()) < 1e-8
    active = b != 0
    np.testing.assert_allclose(grad[active], lam * np.sign(b[active]), atol=1e-7)
    assert np.all(np.abs(grad[~active]) <= lam + 1e-8)


def test_lasso_ols_matches_sklearn():
    sk = pytest.importorskip("sklearn.linear_model")
    g = np.random.default_rng(23)
    X = g.normal(size=(400, 6))
    y = 1.0 + X @ [2.0, 0.0, -1.0, 0.0, 0.5, 0.0] + g.normal(size=400)
    lam = 0.1
    coef = fit_lasso_ols(_design(X), y, lam, tol=1e-13)
    Z, centre, scale = _standardize(_design(X), np.ones(400))
    ref = sk.Lasso(alpha=lam, tol=1e-14, max_iter=1000000).fit(Z, y)
    b_ref = ref.coef_ / scale
    np.testing.assert_allclose(coef, np.r_[ref.intercept_ - centre @ b_ref, b_ref], atol=1e-7)


def test_cv_lambda_deterministic_and_in_grid():
    g = np.random.default_rng(24)
    X = g.normal(size=(300, 3))
    y = (g.random(300) < expit(X[:, 0])).astype(float)
    a = cv_lambda(_design(X), y, "binomial", folds=5)
    b = cv_lambda(_design(X), y, "binomial", folds=5)
    assert a == b
    assert 0 < a <= lasso_lambda_max(_design(X), y)


def test_loglik_increases_to_mle():
    g = np.random.default_rng(25)
    X = g.normal(size=(500, 2))
    y = (g.random(500) < expit(X[:, 0])).astype(float)
    coef = fit_logistic(_design(X), y)
    base = logistic_loglik(coef, _design(X), y)
    for _ in range(20):
        assert logistic_loglik(coef + g.normal(scale=0.05, size=3), _design(X), y) <= base


# -- OLS ---------------------------------------------------------------------

def test_ols_exact_fit_zero_residual():
    g = np.random.default_rng(30)
    D = _design(g.normal(size=(50, 3)))
    y = D @ [1.0, -2.0, 0.5, 3.0]
    coef = fit_ols(D, y)
    np.testing.assert_allclose(coef, [1.0, -2.0, 0.5, 3.0], atol=1e-12)
    np.testing.assert_allclose(y - D @ coef, 0.0, atol=1e-12)


def test_ols_intercept_only_is_mean():
    y = np.array([1.0, 4.0, 2.5, -3.0, 7.25])
    assert fit_ols(np.ones((5, 1)), y)[0] == pytest.approx(y.mean(), abs=1e-15)


def test_ols_residual_orthogonality():
    g = np.random.default_rng(31)
    D = _design(g.uniform(-1, 1, size=(5000, 2)))
    y = g.normal(size=5000) * 10 + 3
    coef, info = fit_ols(D, y, return_info=True)
    scale = np.max(np.abs(D.T @ y / 5000))
    assert np.max(np.abs(D.T @ (y - D @ coef) / 5000)) <= 1e-8 * scale
    assert info["orthogonality"] <= 1e-8 * scale


def test_ols_matches_lstsq_weighted():
    g = np.random.default_rng(32)
    D = _design(g.normal(size=(200, 2)))
    y = g.normal(size=200)
    w = g.uniform(0.1, 2.0, size=200)
    sw = np.sqrt(w)
    ref = np.linalg.lstsq(D * sw[:, None], y * sw, rcond=None)[0]
    np.testing.assert_allclose(fit_ols(D, y, weights=w), ref, atol=1e-12)


def test_ols_rank_deficient_raises_linalg_error():
    x = np.arange(10.0)
    with pytest.raises(np.linalg.LinAlgError):
        fit_ols(np.column_stack([np.ones(10), x, x]), x)
