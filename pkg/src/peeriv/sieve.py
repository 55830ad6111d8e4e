"""Calibration (sieve) estimator.

The inverse instrument propensity and the treatment-probability difference
are estimated without parametric models by maximising two globally concave
sample objectives over a polynomial basis ``v(x)``:

``H2(beta, gamma) = P_n{Z1 m1(beta'v) - beta'v} + P_n{(1-Z1) m1(gamma'v) - gamma'v}``
    with ``m1(u) = u - exp(-u)``; the calibrated weight is
    ``psi = Z1 m1'(beta'v) + (1-Z1) m1'(gamma'v)``.

``H1(alpha) = P_n{m2(alpha'v) - c alpha'v}``, ``c = (-1)^(1-Z1) D1 I(D2=d) psi``
    with ``m2(u) = -log(e^u + e^-u)``; ``phi = m2'(alpha'v) = -tanh(alpha'v)``.

The first-order conditions are the calibration (balance) equations
``P_n{Z1 psi v} = P_n{v} = P_n{(1-Z1) psi v}`` and ``P_n{phi v} = P_n{c v}``.
The effect estimate is ``P_n{(-1)^(1-Z1) I(D2=d) Y1 psi / phi}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._linalg import exact_mean, solve_checked, wgram, wmean
from .basis import Basis, BasisSpec, build_basis
from .data import DyadDataset, EstimandSpec, indicator_columns, to_direct_form
from .errors import ConvergenceError, PreconditionError, WeakInstrumentError
from .estimators import EstimateReport

GRAD_TOL = 1e-9
PHI_FLOOR = 1e-3

__all__ = ["Basis", "BasisSpec", "SieveFit", "build_basis", "estimate_sieve", "fit_sieve",
           "h1_gradient", "h1_objective", "h2_gradient", "h2_objective", "maximize_concave",
           "solve_H1", "solve_H2"]


# -- objectives --------------------------------------------------------------

def m1(u):
    return u - np.exp(-u)


def m1_dot(u):
    return 1.0 + np.exp(-u)


def m2(u):
    a = np.abs(u)
    return -(a + np.log1p(np.exp(-2.0 * a)))


def m2_dot(u):
    return -np.tanh(u)


def _h2_arm(coef, V, arm):
    with np.errstate(over="ignore"):
        u = V @ coef
        return exact_mean(arm * m1(u) - u)


def _h2_arm_grad(coef, V, arm):
    with np.errstate(over="ignore"):
        return wmean(V, arm * m1_dot(V @ coef) - 1.0)


def _h2_arm_hess(coef, V, arm):
    with np.errstate(over="ignore"):
        return -wgram(V, arm * np.exp(-(V @ coef)))


def h2_objective(beta, gamma, V, z1):
    """Sample ``H2(beta, gamma)``."""
    z1 = np.asarray(z1, dtype=float)
    return _h2_arm(beta, V, z1) + _h2_arm(gamma, V, 1.0 - z1)


def h2_gradient(beta, gamma, V, z1):
    """``(dH2/dbeta, dH2/dgamma)``; zero exactly when the balance equations hold."""
    z1 = np.asarray(z1, dtype=float)
    return _h2_arm_grad(beta, V, z1), _h2_arm_grad(gamma, V, 1.0 - z1)


def h1_objective(alpha, V, c):
    """Sample ``H1(alpha)`` for the signed calibrated treatment term ``c``."""
    u = V @ alpha
    return exact_mean(m2(u) - c * u)


def h1_gradient(alpha, V, c):
    return wmean(V, m2_dot(V @ alpha) - c)


def _h1_hess(alpha, V):
    return -wgram(V, 1.0 / np.cosh(V @ alpha) ** 2)


def maximize_concave(objective, gradient, hessian, x0, tol=GRAD_TOL, max_iter=100, what="objective"):
    """Newton ascent with backtracking on a concave function.

    Returns ``(x, trace)`` where ``trace`` lists the objective after every
    accepted step (non-decreasing by construction).
    """
    x = np.array(x0, dtype=float)
    f = objective(x)
    trace = [f]
    for _ in range(max_iter):
        g = gradient(x)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return _polish(x, gnorm, objective, gradient, hessian, trace)
        step = solve_checked(-hessian(x), g, f"{what} Hessian (try a smaller basis)")
        t = 1.0
        while True:
            cand = x + t * step
            fc = objective(cand)
            # rounding allowance only; genuine descent steps are rejected
            if np.isfinite(fc) and fc >= f - 1e-15 * max(1.0, abs(f)):
                break
            t *= 0.5
            if t < 1e-14:
                raise ConvergenceError(f"{what}: line search failed (gradient norm {gnorm:.3g})",
                                       last_iterate=x)
        x, f = cand, fc
        trace.append(f)
    gnorm = float(np.linalg.norm(gradient(x)))
    if gnorm <= tol:
        return x, trace
    raise ConvergenceError(f"{what}: no convergence in {max_iter} iterations "
                           f"(gradient norm {gnorm:.3g})", last_iterate=x)


def _polish(x, gnorm, objective, gradient, hessian, trace):
    """One extra Newton step inside the tolerance, kept if it is an ascent
    step that shrinks the gradient (removes tolerance-sized noise)."""
    try:
        cand = x + np.linalg.solve(-hessian(x), gradient(x))
    except np.linalg.LinAlgError:
        return x, trace
    fc = objective(cand)
    if np.isfinite(fc) and fc >= trace[-1] - 1e-15 * max(1.0, abs(trace[-1])) \
            and np.linalg.norm(gradient(cand)) < gnorm:
        return cand, trace + [fc]
    return x, trace


# -- solvers -----------------------------------------------------------------

def solve_H2(ds: DyadDataset, basis: Basis, tol=GRAD_TOL, max_iter=100):
    """Maximise sample ``H2``; returns ``(beta, gamma, info)``.

    ``H2`` separates into one concave problem per instrument arm.
    """
    z1 = ds.z1.astype(float)
    if not 0 < wmean(z1) < 1:
        raise PreconditionError("both instrument arms must be non-empty")
    V = basis(ds.x)
    coefs, traces = [], []
    for arm, name in ((z1, "beta"), (1.0 - z1, "gamma")):
        c, tr = maximize_concave(lambda b: _h2_arm(b, V, arm), lambda b: _h2_arm_grad(b, V, arm),
                                 lambda b: _h2_arm_hess(b, V, arm), np.zeros(V.shape[1]),
                                 tol, max_iter, f"H2 ({name})")
        coefs.append(c)
        traces.append(tr)
    return coefs[0], coefs[1], {"trace_beta": traces[0], "trace_gamma": traces[1]}


def calibrated_psi(beta, gamma, basis: Basis) -> Callable:
    def psi(z1, X):
        V = basis(X)
        return np.where(np.asarray(z1) == 1, m1_dot(V @ beta), m1_dot(V @ gamma))
    return psi


def solve_H1(ds: DyadDataset, basis: Basis, psi_hat, d: int = 1, tol=GRAD_TOL, max_iter=100):
    """Maximise sample ``H1`` given calibrated weights; returns ``(alpha, info)``.

    ``psi_hat`` is either a per-row array or a function ``(z1, X) -> weights``.
    """
    V = basis(ds.x)
    psi_rows = psi_hat(ds.z1, ds.x) if callable(psi_hat) else np.asarray(psi_hat, dtype=float)
    s, _, w_den = indicator_columns(ds, d)
    c = s * w_den * psi_rows
    alpha, trace = maximize_concave(lambda a: h1_objective(a, V, c), lambda a: h1_gradient(a, V, c),
                                    lambda a: _h1_hess(a, V), np.zeros(V.shape[1]),
                                    tol, max_iter, "H1 (alpha)")
    return alpha, {"trace_alpha": trace}


@dataclass(frozen=True)
class SieveFit:
    basis: Basis
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    psi: Callable
    phi: Callable
    moment_residuals: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)


def fit_sieve(dd: DyadDataset, d: int, basis_spec: BasisSpec = BasisSpec()) -> SieveFit:
    """Solve ``H2`` then ``H1`` on a direct-form dataset."""
    basis = build_basis(dd, basis_spec)
    beta, gamma, info2 = solve_H2(dd, basis)
    psi = calibrated_psi(beta, gamma, basis)
    alpha, info1 = solve_H1(dd, basis, psi, d)

    def phi(X):
        return m2_dot(basis(X) @ alpha)

    V = basis(dd.x)
    s, _, w_den = indicator_columns(dd, d)
    c = s * w_den * psi(dd.z1, dd.x)
    g_beta, g_gamma = h2_gradient(beta, gamma, V, dd.z1)
    resid = {
        "treated_arm": float(np.max(np.abs(g_beta))),
        "control_arm": float(np.max(np.abs(g_gamma))),
        "phi_balance": float(np.max(np.abs(h1_gradient(alpha, V, c)))),
    }
    for a in (alpha, beta, gamma):
        a.setflags(write=False)
    return SieveFit(basis, alpha, beta, gamma, psi, phi, resid, {**info2, **info1})


def estimate_sieve(ds: DyadDataset, spec: EstimandSpec, basis_spec: BasisSpec = BasisSpec(),
                   return_fit=False):
    """Calibration estimator of a direct or spillover effect.

    Raises
    ------
    WeakInstrumentError
        If some row has ``|phi(x)| < 1e-3``.
    """
    dd = to_direct_form(ds, spec)
    dd.check_overlap()
    fit = fit_sieve(dd, spec.d, basis_spec)
    phi = fit.phi(dd.x)
    low = float(np.min(np.abs(phi)))
    if low < PHI_FLOOR:
        raise WeakInstrumentError(f"weak calibration: min |phi(x)| = {low:.3g} below {PHI_FLOOR}")
    s, w_num, _ = indicator_columns(dd, spec.d)
    point = wmean(s * w_num * fit.psi(dd.z1, dd.x) / phi)
    diag = {
        "basis_degree": basis_spec.degree,
        "K": fit.basis.K,
        "calibration_residuals": fit.moment_residuals,
        "max_calibration_residual": max(fit.moment_residuals.values()),
        "min_abs_phi": low,
        "mean_phi": float(wmean(phi)),
        "iterations": {k: len(v) - 1 for k, v in fit.traces.items()},
    }
    report = EstimateReport(spec, "sieve", float(point), dd.n, diagnostics=diag)
    return (report, fit) if return_fit else report
