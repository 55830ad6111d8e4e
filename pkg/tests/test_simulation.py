import warnings

import numpy as np
import pytest

from peeriv import (ConfigurationError, DgpConfig, EstimandSpec, Target, corrupted_nuisances,
                    generate, run_mc, true_nuisances, true_values)
from peeriv.simulation import (OUTCOME, TRUTH, derive_seed, generate_full, instrument_prob,
                               outcome_mean, rng, treatment_prob)

DTE1 = EstimandSpec(Target.DTE, 1)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DgpConfig(99)
    with pytest.raises(ConfigurationError):
        DgpConfig(1000, misspec_pattern="everything_wrong")


def test_instrument_mean_is_half():
    assert abs(generate(DgpConfig(100000, 1)).z1.mean() - 0.5) <= 0.01


def test_ranges_of_latent_and_observed():
    fd = generate_full(DgpConfig(20000, 2))
    assert np.all(np.abs(fd.data.x) <= 1)
    assert np.all((fd.u > 0) & (fd.u <= 0.5))
    np.testing.assert_allclose(fd.cell_probs.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(fd.cell_probs > 0)


def test_observed_outcome_is_selected_potential_outcome():
    fd = generate_full(DgpConfig(5000, 3))
    ds = fd.data
    for (a, b), pot in fd.potential_y1.items():
        m = (ds.d1 == a) & (ds.d2 == b)
        np.testing.assert_array_equal(ds.y1[m], pot[m])
    for (a, b), pot in fd.potential_y2.items():
        m = (ds.d2 == a) & (ds.d1 == b)
        np.testing.assert_array_equal(ds.y2[m], pot[m])


def test_outcome_model_at_fixed_latent_cells():
    """Mean of Y1 - E[Y1(1,1) | X, U] on treated-treated rows, per (X, U) cell, is 0."""
    fd = generate_full(DgpConfig(200000, 4))
    ds = fd.data
    m = (ds.d1 == 1) & (ds.d2 == 1)
    resid = ds.y1[m] - outcome_mean(1, 1, ds.x[m], fd.u[m])
    cells = np.floor((ds.x[m] + 1) / 2 * 3).clip(0, 2).astype(int) @ [1, 3] \
        + 9 * np.floor(fd.u[m] / 0.5 * 2).clip(0, 1).astype(int) @ [1, 2]
    for c in np.unique(cells):
        r = resid[cells == c]
        assert abs(r.mean()) < 3.5 / np.sqrt(r.size)  # errors are N(0, 1) by construction
    assert abs(resid.var() - 1.0) < 0.02


def test_generate_deterministic():
    a = generate(DgpConfig(1000, 7))
    b = generate(DgpConfig(1000, 7))
    assert a == b
    assert a.y1.tobytes() == b.y1.tobytes()
    assert generate(DgpConfig(1000, 8)) != a


def test_generate_golden_values():
    """Pins the declared Philox streams so drift across platforms is caught."""
    ds = generate(DgpConfig(100, 2024))
    g = rng(2024, 0)
    X = g.uniform(-1.0, 1.0, size=(100, 2))
    np.testing.assert_array_equal(ds.x, X)
    e = rng(2024, 1).standard_normal(size=(100, 8))
    key = {(1, 1): 0, (1, 0): 1, (0, 1): 2, (0, 0): 3}
    i = 0
    k = key[(int(ds.d1[i]), int(ds.d2[i]))]
    assert ds.y1[i] - e[i, k] == pytest.approx(
        outcome_mean(int(ds.d1[i]), int(ds.d2[i]), ds.x[i], generate_full(DgpConfig(100, 2024)).u[i]),
        abs=1e-12)


def test_derived_seeds():
    assert derive_seed(3, 1, 2) == derive_seed(3, 1, 2)
    assert len({derive_seed(3, 1, r) for r in range(100)}) == 100
    assert derive_seed(3, 1, 2) != derive_seed(4, 1, 2)


def test_true_values():
    assert true_values() == (7.0, 5.0, 3.0, 1.0, 2.0)
    assert TRUTH["ite"] == TRUTH["dte1"] - TRUTH["dte0"]


def test_true_values_brute_force():
    """Average potential-outcome contrasts over 10^7 draws of (X, U, errors)."""
    g = np.random.Generator(np.random.Philox(31337))
    sums = {"dte1": 0.0, "dte0": 0.0, "ste1": 0.0, "ste0": 0.0}
    total, chunk = 10_000_000, 1_000_000
    for _ in range(total // chunk):
        X = g.uniform(-1, 1, size=(chunk, 2))
        U = 0.5 * (1 - g.random((chunk, 2)))
        y = {k: outcome_mean(k[0], k[1], X, U) + g.standard_normal(chunk) for k in OUTCOME}
        sums["dte1"] += np.sum(y[(1, 1)] - y[(0, 1)])
        sums["dte0"] += np.sum(y[(1, 0)] - y[(0, 0)])
        sums["ste1"] += np.sum(y[(1, 1)] - y[(1, 0)])
        sums["ste0"] += np.sum(y[(0, 1)] - y[(0, 0)])
    for k, v in sums.items():
        assert abs(v / total - TRUTH[k]) <= 0.01


def test_peer_treatment_independent_of_ego_instrument():
    fd = generate_full(DgpConfig(200000, 5))
    ds = fd.data
    key = np.zeros(ds.n, dtype=int)
    for col, lo, hi in ((ds.x[:, 0], -1, 1), (ds.x[:, 1], -1, 1), (fd.u[:, 0], 0, 0.5),
                        (fd.u[:, 1], 0, 0.5)):
        key = key * 6 + np.minimum(((col - lo) / (hi - lo) * 6).astype(int), 5)
    z = ds.z1.astype(float)
    d = ds.d2.astype(float)
    cnt = np.bincount(key)
    zc = z - (np.bincount(key, z) / np.maximum(cnt, 1))[key]
    dc = d - (np.bincount(key, d) / np.maximum(cnt, 1))[key]
    b = (zc @ dc) / (zc @ zc)
    se = np.sqrt(np.sum(zc ** 2 * (dc - b * zc) ** 2)) / (zc @ zc)
    assert abs(b) < 3 * se


def _brute_nuisances(x, n=400000, seed=0):
    """Monte Carlo E[. | Z1 = z, X = x] by simulating U, Z2 and the treatments."""
    g = np.random.Generator(np.random.Philox(seed))
    X = np.tile(x, (n, 1))
    U = 0.5 * (1 - g.random((n, 2)))
    z2 = (g.random(n) < instrument_prob(X)).astype(int)
    out = {}
    for z1 in (0, 1):
        d1 = (g.random(n) < treatment_prob(z1, X, U)).astype(int)
        d2 = (g.random(n) < treatment_prob(z2, X, U)).astype(int)
        y = np.select([(d1 == a) & (d2 == b) for a, b in OUTCOME],
                      [outcome_mean(a, b, X, U) + g.standard_normal(n) for a, b in OUTCOME])
        out[z1] = (np.mean(d1 * d2), np.mean(y * d2))
    return out


@pytest.mark.parametrize("x", [[0.0, 0.0], [0.7, -0.4], [-0.9, -0.9]])
def test_oracle_nuisances_match_brute_force(x):
    t = true_nuisances(DTE1)
    bf = _brute_nuisances(np.array(x))
    X = np.array([x])
    assert t.mu(X)[0] == pytest.approx(bf[0][0], abs=0.005)
    assert t.eta(X)[0] == pytest.approx(bf[0][1], abs=0.03)
    assert t.delta(X)[0] == pytest.approx(bf[1][0] - bf[0][0], abs=0.007)
    assert t.pi1(X)[0] == pytest.approx(instrument_prob(X)[0])
    assert t.omega(X)[0] == pytest.approx(7 + 4 * x[0] + 3.5 * x[1])


def test_corruption_patterns():
    X = np.array([[0.2, -0.3], [0.5, 0.5]])
    t = true_nuisances(DTE1)
    ipw = corrupted_nuisances(DTE1, "only_ipw_correct")
    np.testing.assert_array_equal(ipw.delta(X), t.delta(X))
    np.testing.assert_array_equal(ipw.omega(X), 0.0)
    g = corrupted_nuisances(DTE1, "only_g_correct")
    np.testing.assert_array_equal(g.omega(X), t.omega(X))
    np.testing.assert_array_equal(g.pi1(X), t.pi1(X))
    np.testing.assert_array_equal(g.eta(X), 0.0)
    reg = corrupted_nuisances(DTE1, "only_reg_correct")
    np.testing.assert_array_equal(reg.eta(X), t.eta(X))
    assert np.all(reg.pi1(X) != t.pi1(X))


# -- Monte Carlo harness -----------------------------------------------------

def test_run_mc_worker_invariant_and_deterministic():
    kw = dict(estimands=("dte1", "ste0"), ci="plugin")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = run_mc(3, [300], ["wald", "mr"], seed=9, workers=1, **kw)
        b = run_mc(3, [300], ["wald", "mr"], seed=9, workers=2, **kw)
        c = run_mc(3, [300], ["wald", "mr"], seed=9, workers=1, **kw)
    assert a.to_csv() == b.to_csv() == c.to_csv()
    assert [r.points for r in a.rows] == [r.points for r in b.rows]


def test_run_mc_low_rep_warning_and_table_formats(tmp_path):
    with pytest.warns(RuntimeWarning, match="low-rep"):
        t = run_mc(2, [200], ["mr"], seed=1, estimands=("dte1",), ci="bootstrap", B=5)
    row = t.row("dte1", "mr", 200)
    assert 0.0 <= row.cp <= 1.0 and row.sd >= 0 and row.reps == 2
    csv_text = t.to_csv(tmp_path / "t.csv")
    assert csv_text.splitlines()[0] == "estimand,method,n,bias,sd,cp,failures"
    assert (tmp_path / "t.csv").read_text() == csv_text
    text = t.to_text()
    assert "DTE1" in text and "Bias" in text and "CP" in text
    assert len(t.summary_lines()) == 1


def test_run_mc_failure_column():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        t = run_mc(2, [100], ["sieve"], seed=2, estimands=("dte1",), ci="none",
                   basis=__import__("peeriv").BasisSpec(degree=2))
    row = t.row("dte1", "sieve", 100)
    assert row.failures + len([p for p in row.points if p == p]) == 2


def test_run_mc_pattern_uses_oracle():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        t = run_mc(2, [2000], ["ipw", "mr"], seed=3, estimands=("dte1",), ci="none",
                   pattern="only_ipw_correct")
    assert t.row("dte1", "ipw", 2000).points == t.row("dte1", "mr", 2000).points


def test_run_mc_settings_validation():
    with pytest.raises(ConfigurationError):
        run_mc(1, [200], ["mr"])
    with pytest.raises(ConfigurationError):
        run_mc(2, [50], ["mr"])
    with pytest.raises(ConfigurationError):
        run_mc(2, [200], ["nnet"])
