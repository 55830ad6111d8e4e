import numpy as np
import pytest

from conftest import sim
from peeriv import (DyadDataset, EstimandSpec, NuisanceConfig, NuisanceSet, PreconditionError,
                    SchemaError, SingularSystemError, Target, WeakInstrumentError, estimate,
                    fit_all, fit_delta, fit_omega, true_nuisances)
from peeriv.data import indicator_columns
from peeriv.errors import ConfigurationError
from peeriv.nuisance import (fit_eta, fit_mu, fit_pi, index_design, load_nuisance_csv,
                             solve_delta_moment, write_nuisance_csv)
from peeriv.simulation import instrument_prob

DTE1 = EstimandSpec(Target.DTE, 1)
CFG = NuisanceConfig()


def _grid(k=7, lim=0.9):
    a = np.linspace(-lim, lim, k)
    return np.array([[u, v] for u in a for v in a])


# -- configuration -----------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"trim_eps": 0.0}, {"trim_eps": 0.5}, {"newton_tol": 0.0}, {"learner": "gbm"},
    {"lasso_folds": 1}, {"a1_a2_choice": "spline"},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        NuisanceConfig(**kwargs)


# -- step 1: pi --------------------------------------------------------------

def test_pi_sums_to_one_and_is_trimmed():
    ds = sim(5000, 1)
    nuis = fit_all(ds, DTE1, NuisanceConfig(trim_eps=0.49))
    X = _grid()
    np.testing.assert_allclose(nuis.pi(1, X) + nuis.pi(0, X), 1.0, atol=1e-15)
    p = nuis.pi1(ds.x)
    assert p.min() >= 0.49 and p.max() <= 0.51
    assert nuis.meta["trimmed"] > 0


def test_default_trimming_bounds():
    ds = sim(5000, 1)
    nuis = fit_all(ds, DTE1)
    p = nuis.predict(ds)["pi"]
    assert p.min() >= 0.01 and p.max() <= 0.99


def test_pi_score_at_solution():
    ds = sim(5000, 2)
    pi1, info = fit_pi(ds, CFG)
    assert info["converged"] and info["score_norm"] <= CFG.newton_tol


# -- step 3: eta -------------------------------------------------------------

def _eta_fit_and_se(n, seed):
    ds = sim(n, seed)
    eta, info = fit_eta(ds, 1, CFG)
    arm = ds.z1 == 0
    V = index_design(ds.x[arm], CFG)
    _, w_num, _ = indicator_columns(ds, 1)
    r = w_num[arm] - V @ eta.coef
    bread = np.linalg.inv(V.T @ V)
    cov = bread @ (V.T @ (V * (r * r)[:, None])) @ bread  # HC0 sandwich
    G = index_design(_grid(), CFG)
    se = np.sqrt(np.einsum("ij,jk,ik->i", G, cov, G))
    return eta(_grid()), se


def _eta_projection():
    """Best linear predictor of the true eta given Z1 = 0 (quadrature over X)."""
    x, w = np.polynomial.legendre.leggauss(40)
    X = np.array([[a, b] for a in x for b in x])
    W = np.outer(w, w).ravel() * (1.0 - instrument_prob(X))
    V = index_design(X, CFG)
    eta = true_nuisances(DTE1).eta(X)
    coef = np.linalg.solve(V.T @ (V * W[:, None]), V.T @ (W * eta))
    return index_design(_grid(), CFG) @ coef


def test_eta_matches_best_linear_projection_of_oracle():
    pred, se = _eta_fit_and_se(10000, 11)
    assert np.all(np.abs(pred - _eta_projection()) < 3 * se)


@pytest.mark.xfail(strict=True, reason="a linear eta cannot follow the curved conditional "
                                       "mean of the reference process at the grid corners "
                                       "(gap about 0.35 vs SE about 0.07); see the decisions ledger")
def test_eta_matches_conditional_mean_on_grid():
    pred, se = _eta_fit_and_se(10000, 11)
    truth = true_nuisances(DTE1).eta(_grid())
    assert np.all(np.abs(pred - truth) < 3 * se)


# -- step 4: delta -----------------------------------------------------------

def test_delta_mean_close_to_enumerated_truth(sim20000):
    nuis = fit_all(sim20000, DTE1)
    fitted = nuis.delta(sim20000.x).mean()
    truth = true_nuisances(DTE1).delta(sim20000.x).mean()
    assert abs(fitted - truth) <= 0.02


def test_delta_bounded_on_grid():
    nuis = fit_all(sim(5000, 3), DTE1)
    X = np.array([[a, b] for a in np.linspace(-50, 50, 21) for b in np.linspace(-50, 50, 21)])
    assert np.all(np.abs(nuis.delta(X)) < 1)


def test_irrelevant_instrument_flagged():
    ds = sim(20000, 4)
    z = (np.random.default_rng(99).random(ds.n) < 0.5).astype(np.int8)
    ds = ds.replace(z1=z)
    nuis = fit_all(ds, DTE1)
    assert np.max(np.abs(nuis.delta(_grid()))) < 0.05
    assert nuis.meta["weak_iv"]
    with pytest.raises(WeakInstrumentError):
        estimate(ds, DTE1, "mr", nuis=nuis)


def _constant_delta_data(n, seed):
    """One covariate; D1 depends on Z1 only, D2 independent: delta = 0.4 * 0.5."""
    g = np.random.default_rng(seed)
    x = g.uniform(-1, 1, size=(n, 1))
    z1 = (g.random(n) < 0.5).astype(np.int8)
    z2 = (g.random(n) < 0.5).astype(np.int8)
    d1 = (g.random(n) < 0.2 + 0.4 * z1).astype(np.int8)
    d2 = (g.random(n) < 0.5).astype(np.int8)
    y1 = 1.0 + 2.0 * d1 + x[:, 0] + g.normal(size=n)
    return DyadDataset(x, z1, z2, d1, d2, y1)


def test_constant_delta_slope_within_three_se():
    slopes = np.array([fit_all(_constant_delta_data(2000, s), DTE1).delta.coef[1]
                       for s in range(200)])
    se = slopes.std(ddof=1)  # Monte Carlo SE of one fit
    check = fit_all(_constant_delta_data(2000, 10_000), DTE1).delta.coef
    assert abs(check[1]) < 3 * se
    assert abs(slopes.mean()) < 3 * se / np.sqrt(slopes.size)
    assert np.tanh(check[0]) == pytest.approx(0.2, abs=3 * se)


def test_delta_moment_solved_to_tolerance():
    ds = sim(5000, 5)
    nuis = fit_all(ds, DTE1)
    info = nuis.meta["delta"]
    assert info["converged"] and info["moment_norm"] <= CFG.newton_tol


def test_solve_delta_moment_recovers_exact_root():
    g = np.random.default_rng(6)
    n = 4000
    V = np.column_stack([np.ones(n), g.uniform(-1, 1, n)])
    z1 = (g.random(n) < 0.5).astype(float)
    xi0 = np.array([0.3, -0.4])
    r = z1 * np.tanh(V @ xi0)
    w = np.ones(n)
    xi, info = solve_delta_moment(V, z1, w, r)
    np.testing.assert_allclose(xi, xi0, atol=1e-10)


def test_fit_delta_public_signature():
    ds = sim(3000, 7)
    pi1, _ = fit_pi(ds, CFG)
    mu, _ = fit_mu(ds, 1, CFG)
    delta, info = fit_delta(ds, DTE1, pi1, mu, CFG)
    np.testing.assert_array_equal(delta(ds.x), fit_all(ds, DTE1).delta(ds.x))


# -- step 5: omega -----------------------------------------------------------

def test_omega_recovers_linear_effect(sim20000):
    coef = fit_all(sim20000, DTE1).omega.coef
    boots = []
    for r in range(40):
        idx = np.random.default_rng([77, r]).integers(0, sim20000.n, sim20000.n)
        boots.append(fit_all(sim20000.take(idx), DTE1).omega.coef)
    se = np.std(boots, axis=0, ddof=1)
    assert np.all(np.abs(coef - [7.0, 4.0, 3.5]) < 3 * se)


def test_omega_mean_close_to_seven(sim20000):
    nuis = fit_all(sim20000, DTE1)
    assert abs(nuis.omega(sim20000.x).mean() - 7.0) <= 0.18


@pytest.mark.parametrize("c", [1.5, -3.0])
def test_omega_exact_structure(c):
    ds = sim(3000, 8)
    ind = ds.d2 == 1
    ds = ds.replace(y1=np.where(ind, c * ds.d1, ds.y1))
    pi1, _ = fit_pi(ds, CFG)
    mu, _ = fit_mu(ds, 1, CFG)
    omega, info = fit_omega(ds, DTE1, pi1, mu, lambda X: c * mu(X), CFG)
    np.testing.assert_allclose(omega.coef, [c, 0.0, 0.0], atol=1e-10)


def test_omega_residual_moment_norm():
    nuis = fit_all(sim(5000, 9), DTE1)
    info = nuis.meta["omega"]
    assert info["moment_norm"] <= 1e-8 * info["scale"]


def test_omega_singular_system_reports_step():
    ds = sim(2000, 10)
    ds = ds.replace(x=np.column_stack([ds.x[:, 0], ds.x[:, 0]]))
    with pytest.raises(SingularSystemError) as err:
        fit_all(ds, DTE1)
    assert "step" in str(err.value)


# -- orchestration -----------------------------------------------------------

@pytest.mark.parametrize("label", ["dte1", "dte0", "ste1", "ste0"])
def test_fit_all_converges(label):
    nuis = fit_all(sim(5000, 12), EstimandSpec.parse(label))
    assert nuis.meta["converged"]
    assert all(nuis.meta[k]["converged"] for k in ("pi", "mu", "eta", "delta", "omega"))


def test_single_instrument_arm_rejected():
    ds = sim(1000, 13)
    with pytest.raises(PreconditionError):
        fit_all(ds.replace(z1=np.ones(ds.n, dtype=np.int8)), DTE1)


def test_lasso_learner_same_interface():
    ds = sim(2000, 14)
    par = fit_all(ds, DTE1)
    las = fit_all(ds, DTE1, NuisanceConfig(learner="lasso", lasso_lambda=0.005))
    assert set(par.predict(ds)) == set(las.predict(ds))
    assert las.meta["learner"] == "lasso" and par.meta["learner"] == "parametric"
    assert las.meta["converged"]
    for v in las.predict(ds).values():
        assert v.shape == (ds.n,) and np.all(np.isfinite(v))
    assert abs(estimate(ds, DTE1, "mr", nuis=las).point - 7.0) < 1.0


def test_lasso_learner_cross_validated():
    ds = sim(1500, 15)
    nuis = fit_all(ds, DTE1, NuisanceConfig(learner="lasso", lasso_folds=3))
    assert nuis.meta["pi"]["lambda"] > 0


def test_fit_all_bit_identical():
    ds = sim(5000, 16)
    a = fit_all(ds, DTE1).predict(ds)
    b = fit_all(ds, DTE1).predict(ds)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


# -- precomputed file --------------------------------------------------------

def test_precomputed_round_trip(tmp_path):
    ds = sim(500, 17)
    nuis = fit_all(ds, DTE1)
    write_nuisance_csv(nuis, ds, tmp_path / "nuis.csv")
    pre = load_nuisance_csv(tmp_path / "nuis.csv", n=ds.n)
    a, b = nuis.predict(ds), pre.predict(ds)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert estimate(ds, DTE1, "mr", nuis=pre).point == estimate(ds, DTE1, "mr", nuis=nuis).point


def test_precomputed_row_mismatch(tmp_path):
    ds = sim(500, 17)
    write_nuisance_csv(fit_all(ds, DTE1), ds, tmp_path / "nuis.csv")
    with pytest.raises(SchemaError):
        load_nuisance_csv(tmp_path / "nuis.csv", n=499)
    pre = NuisanceSet.from_arrays(*(np.full(10, 0.5),) * 5)
    with pytest.raises(SchemaError):
        pre.predict(ds)
