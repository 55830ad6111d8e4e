"""Nuisance functions for the direct-effect estimators.

For a direct-form dataset and peer level ``d`` the five nuisances are

========  ==========================================================
``pi``    instrument propensity ``pr(Z1 = z | X)``
``mu``    ``E[D1 I(D2=d) | Z1=0, X]``
``eta``   ``E[Y1 I(D2=d) | Z1=0, X]``
``delta`` ``E[D1 I(D2=d) | Z1=1, X] - E[D1 I(D2=d) | Z1=0, X]``
``omega`` conditional effect ``E[Y1(1,d) - Y1(0,d) | X]``
========  ==========================================================

The parametric learner fits them in order: logistic ``pi`` on all rows,
logistic ``mu`` and least-squares ``eta`` on the ``Z1=0`` rows, then
``delta = tanh(xi4' x~)`` and linear ``omega = xi5' x~`` from the two
inverse-propensity-weighted moment equations, with ``x~ = (1, x)`` as the
index function for both.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import glm
from ._linalg import solve_checked, wgram, wmean
from .basis import polynomial_features
from .data import DyadDataset, EstimandSpec, indicator_columns, to_direct_form
from .errors import (ConfigurationError, ConvergenceError, PeerIVError, SchemaError,
                     SingularSystemError, relabel)

WEAK_IV_MEAN = 0.02
LEARNERS = ("parametric", "lasso")
INDEX_CHOICES = ("intercept_plus_x", "intercept_only")


@dataclass(frozen=True)
class NuisanceConfig:
    """Fitting options.

    ``lasso_lambda=None`` selects the penalty by ``lasso_folds``-fold
    cross-validation; a float fixes it.  ``a1_a2_choice`` is the index
    function used by every parametric nuisance; ``intercept_only`` gives the
    saturated fit for covariate-free data.
    """

    learner: str = "parametric"
    trim_eps: float = 0.01
    newton_tol: float = 1e-10
    newton_max_iter: int = 100
    lasso_lambda: Optional[float] = None
    lasso_folds: int = 5
    lasso_degree: int = 2
    a1_a2_choice: str = "intercept_plus_x"

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ConfigurationError(f"learner must be one of {LEARNERS}")
        if not 0.0 < self.trim_eps < 0.5:
            raise ConfigurationError("trim_eps must lie in (0, 0.5)")
        if not self.newton_tol > 0:
            raise ConfigurationError("newton_tol must be positive")
        if self.newton_max_iter < 1:
            raise ConfigurationError("newton_max_iter must be at least 1")
        if self.lasso_lambda is not None and self.lasso_lambda < 0:
            raise ConfigurationError("lasso_lambda must be non-negative")
        if self.lasso_folds < 2:
            raise ConfigurationError("lasso_folds must be at least 2")
        if self.a1_a2_choice not in INDEX_CHOICES:
            raise ConfigurationError(f"a1_a2_choice must be one of {INDEX_CHOICES}")


def index_design(X, cfg: NuisanceConfig):
    """Index basis ``x~``: ``(1, x)`` or the constant alone."""
    X = np.asarray(X, dtype=float)
    p = 0 if cfg.a1_a2_choice == "intercept_only" else X.shape[1]
    V = np.empty((X.shape[0], p + 1))
    V[:, 0] = 1.0
    V[:, 1:] = X[:, :p]
    return V


@dataclass(frozen=True)
class NuisanceSet:
    """Fitted nuisances with prediction access.

    Each attribute other than ``meta`` maps a covariate matrix to one value
    per row; ``pi1`` returns ``pr(Z1=1 | X)`` and :meth:`pi` the probability
    of a given instrument value.
    """

    pi1: Callable
    mu: Callable
    eta: Callable
    delta: Callable
    omega: Callable
    meta: dict = field(default_factory=dict)

    def pi(self, z1, X):
        p1 = self.pi1(X)
        return np.where(np.asarray(z1) == 1, p1, 1.0 - p1)

    def predict(self, ds: DyadDataset) -> dict:
        """All five nuisances evaluated on the rows of a direct-form dataset."""
        X = ds.x
        p1 = self.pi1(X)
        return {
            "pi1": p1,
            "pi": np.where(ds.z1 == 1, p1, 1.0 - p1),
            "mu": self.mu(X),
            "eta": self.eta(X),
            "delta": self.delta(X),
            "omega": self.omega(X),
        }

    @classmethod
    def from_arrays(cls, pi1, mu, eta, delta, omega, meta=None):
        """Precomputed per-row values; the functions only accept matching row counts."""
        arrays = [np.array(a, dtype=float) for a in (pi1, mu, eta, delta, omega)]
        n = arrays[0].shape[0]
        if any(a.shape != (n,) for a in arrays):
            raise SchemaError("precomputed nuisance columns differ in length")
        for a in arrays:
            a.setflags(write=False)

        def lookup(a):
            def f(X):
                if np.asarray(X).shape[0] != n:
                    raise SchemaError(f"precomputed nuisances cover {n} rows, got {np.asarray(X).shape[0]}")
                return a
            return f

        m = {"learner": "precomputed", "n": n}
        m.update(meta or {})
        return cls(*(lookup(a) for a in arrays), meta=m)


# -- individual steps --------------------------------------------------------

def _linear(coef, cfg, link=None):
    coef = np.array(coef, dtype=float)
    coef.setflags(write=False)

    def f(X):
        v = index_design(X, cfg) @ coef
        return v if link is None else link(v)

    f.coef = coef
    return f


def fit_pi(ds: DyadDataset, cfg: NuisanceConfig):
    """Step 1: instrument propensity, trimmed to ``[eps, 1 - eps]``."""
    eps = cfg.trim_eps
    if cfg.learner == "lasso":
        feats = _lasso_features(ds.x, cfg)
        lam = cfg.lasso_lambda if cfg.lasso_lambda is not None else \
            glm.cv_lambda(feats, ds.z1, "binomial", cfg.lasso_folds)
        coef, info = glm.fit_logistic(feats, ds.z1, penalty=lam, return_info=True)
        info = {k: v for k, v in info.items() if not k.startswith("_")}

        def raw(X):
            return glm.expit(_lasso_features(X, cfg) @ coef)
    else:
        coef, info = glm.fit_logistic(index_design(ds.x, cfg), ds.z1, tol=cfg.newton_tol,
                                      max_iter=cfg.newton_max_iter, return_info=True)

        def raw(X):
            return glm.expit(index_design(X, cfg) @ coef)

    def pi1(X):
        return np.clip(raw(X), eps, 1.0 - eps)

    pi1.coef = coef
    p = raw(ds.x)
    info = dict(info, trimmed=int(np.sum((p < eps) | (p > 1 - eps))))
    return pi1, info


def _lasso_features(X, cfg):
    return polynomial_features(X, cfg.lasso_degree)


def fit_mu(ds: DyadDataset, d: int, cfg: NuisanceConfig):
    """Step 2: logistic fit of ``D1 I(D2=d)`` on the ``Z1 = 0`` rows."""
    _, _, w_den = indicator_columns(ds, d)
    arm = ds.z1 == 0
    if cfg.learner == "lasso":
        feats = _lasso_features(ds.x[arm], cfg)
        lam = cfg.lasso_lambda if cfg.lasso_lambda is not None else \
            glm.cv_lambda(feats, w_den[arm], "binomial", cfg.lasso_folds)
        coef, info = glm.fit_logistic(feats, w_den[arm], penalty=lam, return_info=True)
        info = {k: v for k, v in info.items() if not k.startswith("_")}

        def mu(X):
            return glm.expit(_lasso_features(X, cfg) @ coef)

        mu.coef = coef
        return mu, info
    coef, info = glm.fit_logistic(index_design(ds.x[arm], cfg), w_den[arm], tol=cfg.newton_tol,
                                  max_iter=cfg.newton_max_iter, return_info=True)
    return _linear(coef, cfg, glm.expit), info


def fit_eta(ds: DyadDataset, d: int, cfg: NuisanceConfig):
    """Step 3: least squares of ``Y1 I(D2=d)`` on the ``Z1 = 0`` rows."""
    _, w_num, _ = indicator_columns(ds, d)
    arm = ds.z1 == 0
    if cfg.learner == "lasso":
        feats = _lasso_features(ds.x[arm], cfg)
        lam = cfg.lasso_lambda if cfg.lasso_lambda is not None else \
            glm.cv_lambda(feats, w_num[arm], "gaussian", cfg.lasso_folds)
        coef, info = glm.fit_lasso_ols(feats, w_num[arm], lam, return_info=True)

        def eta(X):
            return _lasso_features(X, cfg) @ coef

        eta.coef = coef
        return eta, info
    coef, info = glm.fit_ols(index_design(ds.x[arm], cfg), w_num[arm], return_info=True)
    return _linear(coef, cfg), info


def _logcosh(u):
    a = np.abs(u)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def solve_delta_moment(V, z1, w, r, tol=1e-10, max_iter=100):
    """Root of ``P_n[w V (r - tanh(V xi) z1)] = 0``.

    With ``w z1 >= 0`` the map is the gradient of the concave function
    ``P_n[w r V] xi - P_n[w z1 logcosh(V xi)]``, so damped Newton with
    backtracking on that function converges whenever a root exists.
    Returns ``(xi, info)``.
    """
    wz = w * z1
    lin = wmean(V, w * r)

    def objective(xi):
        return float(lin @ xi - wmean(_logcosh(V @ xi), wz))

    xi = np.zeros(V.shape[1])
    obj = objective(xi)
    for it in range(max_iter + 1):
        u = V @ xi
        grad = lin - wmean(V, wz * np.tanh(u))
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            xi, gnorm = _polish(xi, gnorm, lambda v: lin - wmean(V, wz * np.tanh(V @ v)),
                                lambda v: wgram(V, wz / np.cosh(V @ v) ** 2))
            return xi, {"iterations": it, "converged": True, "moment_norm": gnorm}
        if it == max_iter:
            break
        hess = wgram(V, wz / np.cosh(u) ** 2)
        step = solve_checked(hess, grad, "delta moment Jacobian (try a smaller index basis)")
        t = 1.0
        while True:
            cand = xi + t * step
            new = objective(cand)
            if new >= obj - 1e-14 * max(1.0, abs(obj)) or t < 1e-12:
                break
            t *= 0.5
        xi, obj = cand, new
        if np.max(np.abs(V @ xi)) > 40:
            break
    raise ConvergenceError(f"delta moment equation did not converge (moment norm {gnorm:.3g})",
                           last_iterate=xi)


def _polish(x, gnorm, gradient, neg_hessian):
    """One extra full Newton step, kept only if it shrinks the gradient.

    Inside the tolerance the quadratic rate takes the iterate to rounding
    level in a single step, which removes tolerance-sized noise from
    downstream ratios.
    """
    try:
        cand = x + np.linalg.solve(neg_hessian(x), gradient(x))
    except np.linalg.LinAlgError:
        return x, gnorm
    cnorm = float(np.linalg.norm(gradient(cand)))
    return (cand, cnorm) if cnorm < gnorm else (x, gnorm)


def fit_delta(ds: DyadDataset, spec: EstimandSpec, pi_hat, mu_hat, cfg: NuisanceConfig):
    """Step 4: ``delta(x) = tanh(xi4' x~)`` from the weighted moment equation.

    ``pi_hat`` maps covariates to ``pr(Z1=1 | X)``; ``mu_hat`` to the
    fitted ``mu``.  Returns ``(delta_function, info)``.
    """
    dd = to_direct_form(ds, spec)
    return _fit_delta_direct(dd, spec.d, pi_hat, mu_hat, cfg)


def _fit_delta_direct(dd, d, pi_hat, mu_hat, cfg):
    s, _, w_den = indicator_columns(dd, d)
    p1 = pi_hat(dd.x)
    w = s / np.where(dd.z1 == 1, p1, 1.0 - p1)
    V = index_design(dd.x, cfg)
    xi, info = solve_delta_moment(V, dd.z1.astype(float), w, w_den - mu_hat(dd.x),
                                  cfg.newton_tol, cfg.newton_max_iter)
    f = _linear(xi, cfg, np.tanh)
    vals = f(dd.x)
    info = dict(info, mean_delta=float(np.mean(vals)), min_abs_delta=float(np.min(np.abs(vals))),
                weak_iv=bool(abs(np.mean(vals)) < WEAK_IV_MEAN))
    return f, info


def omega_system(V, w, y_term, t_term):
    """Matrix and right-hand side of ``P_n[w V (y_term - (V xi) t_term)] = 0``."""
    return wgram(V, w * t_term), wmean(V, w * y_term)


def solve_linear_moment(V, w, y_term, t_term, what="omega moment system"):
    M, b = omega_system(V, w, y_term, t_term)
    xi = solve_checked(M, b, what + " (collinear index or degenerate instrument arm)")
    xi = xi + solve_checked(M, b - M @ xi, what)
    resid = float(np.linalg.norm(b - M @ xi))
    return xi, {"iterations": 1, "converged": True, "moment_norm": resid,
                "scale": float(max(1.0, np.linalg.norm(b)))}


def fit_omega(ds: DyadDataset, spec: EstimandSpec, pi_hat, mu_hat, eta_hat, cfg: NuisanceConfig):
    """Step 5: linear ``omega(x) = xi5' x~``; the moment is linear in ``xi5``."""
    dd = to_direct_form(ds, spec)
    return _fit_omega_direct(dd, spec.d, pi_hat, mu_hat, eta_hat, cfg)


def _fit_omega_direct(dd, d, pi_hat, mu_hat, eta_hat, cfg):
    s, w_num, w_den = indicator_columns(dd, d)
    p1 = pi_hat(dd.x)
    w = s / np.where(dd.z1 == 1, p1, 1.0 - p1)
    V = index_design(dd.x, cfg)
    xi, info = solve_linear_moment(V, w, w_num - eta_hat(dd.x), w_den - mu_hat(dd.x))
    return _linear(xi, cfg), info


def fit_all(ds: DyadDataset, spec: EstimandSpec, cfg: NuisanceConfig = NuisanceConfig()) -> NuisanceSet:
    """Run the five fitting steps in order on the direct form of ``(ds, spec)``."""
    dd = to_direct_form(ds, spec)
    dd.check_overlap()
    return fit_direct(dd, spec.d, cfg)


def fit_direct(dd: DyadDataset, d: int, cfg: NuisanceConfig, pi_fit=None) -> NuisanceSet:
    """:func:`fit_all` on an already direct-form dataset.

    ``pi_fit`` reuses a step-1 result (it does not depend on ``d``).
    """
    meta = {"learner": cfg.learner, "d": d, "n": dd.n}

    def run(step, fn, *args):
        try:
            return fn(*args)
        except PeerIVError as exc:
            raise relabel(exc, step) from exc

    pi1, meta["pi"] = pi_fit if pi_fit is not None else run("step 1 (pi)", fit_pi, dd, cfg)
    mu, meta["mu"] = run("step 2 (mu)", fit_mu, dd, d, cfg)
    eta, meta["eta"] = run("step 3 (eta)", fit_eta, dd, d, cfg)
    delta, meta["delta"] = run("step 4 (delta)", _fit_delta_direct, dd, d, pi1, mu, cfg)
    omega, meta["omega"] = run("step 5 (omega)", _fit_omega_direct, dd, d, pi1, mu, eta, cfg)
    meta["converged"] = all(meta[k]["converged"] for k in ("pi", "mu", "eta", "delta", "omega"))
    meta["weak_iv"] = meta["delta"]["weak_iv"]
    meta["trimmed"] = meta["pi"]["trimmed"]
    return NuisanceSet(pi1, mu, eta, delta, omega, meta)


def coefficients(nuis: NuisanceSet) -> dict:
    """Coefficient vectors of a fitted set (empty for precomputed nuisances)."""
    out = {}
    for k in ("pi1", "mu", "eta", "delta", "omega"):
        c = getattr(getattr(nuis, k), "coef", None)
        if c is not None:
            out[k] = c.tolist()
    return out


# -- precomputed file --------------------------------------------------------

NUISANCE_COLUMNS = ("pi1", "mu", "eta", "delta", "omega")


def load_nuisance_csv(path, n: Optional[int] = None) -> NuisanceSet:
    """Read per-row ``pi1, mu, eta, delta, omega`` aligned to the data rows."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if tuple(header) != NUISANCE_COLUMNS:
            raise SchemaError(f"nuisance header must be {','.join(NUISANCE_COLUMNS)}", line=1)
        rows = []
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != len(NUISANCE_COLUMNS):
                raise SchemaError("wrong number of fields", line=lineno)
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise SchemaError(f"malformed number ({exc})", line=lineno) from None
    a = np.array(rows, dtype=float).reshape(-1, len(NUISANCE_COLUMNS))
    if n is not None and a.shape[0] != n:
        raise SchemaError(f"nuisance file has {a.shape[0]} rows, data has {n}")
    if np.any((a[:, 0] <= 0) | (a[:, 0] >= 1)):
        raise SchemaError("pi1 must lie strictly between 0 and 1")
    return NuisanceSet.from_arrays(*a.T, meta={"source": str(path)})


def write_nuisance_csv(nuis: NuisanceSet, ds: DyadDataset, path) -> None:
    """Write the per-row predictions of ``nuis`` on a direct-form dataset."""
    pred = nuis.predict(ds)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NUISANCE_COLUMNS)
        for i in range(ds.n):
            w.writerow([repr(float(pred[k][i])) for k in NUISANCE_COLUMNS])
