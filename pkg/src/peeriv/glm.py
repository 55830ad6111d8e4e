"""Logistic and least-squares fitters, plain and lasso-penalised.

The unpenalised logistic fit is Newton-Raphson on the mean log-likelihood;
the lasso variants are coordinate descent on standardised columns with an
unpenalised intercept (glmnet's parameterisation).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_expit

from ._linalg import solve_checked, wgram, wmean
from .errors import ConvergenceError, SeparationError, SingularSystemError

# |linear predictor| beyond this means fitted probabilities within 1e-13 of 0/1
SEPARATION_ETA = 30.0


def _check_design(design, labels=None):
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("design must be a non-empty 2-d array")
    if not np.all(X[:, 0] == 1.0):
        raise ValueError("first design column must be the intercept")
    if labels is not None:
        y = np.asarray(labels, dtype=float)
        if y.shape != (X.shape[0],):
            raise ValueError("labels do not match design rows")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0/1")
    return X


def _weights(weights, n):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0):
        raise ValueError("weights must be a non-negative vector, one per row")
    return w


def logistic_loglik(coef, X, y, w=None):
    """Mean (weighted) Bernoulli log-likelihood."""
    eta = X @ coef
    return float(wmean(y * eta + log_expit(-eta), w))


def logistic_score(coef, X, y, w=None):
    p = expit(X @ coef)
    return wmean(X, (y - p) if w is None else w * (y - p))


def fit_logistic(design, labels, weights=None, penalty=None, tol=1e-10, max_iter=100,
                 return_info=False):
    """Logistic regression coefficients.

    Parameters
    ----------
    design : (n, k) array
        Design matrix whose first column is the intercept.
    labels : (n,) 0/1 array
    weights : (n,) array, optional
        Non-negative case weights.
    penalty : float, optional
        Lasso penalty on every non-intercept coefficient (columns are
        standardised internally). ``None`` gives the maximum-likelihood fit.
    tol : float
        Convergence threshold on the norm of the mean score (MLE) or on the
        largest coefficient change (lasso).
    return_info : bool
        Also return a dict with ``iterations``, ``converged`` and
        ``score_norm``.

    Raises
    ------
    ConvergenceError
        No convergence within ``max_iter``; ``last_iterate`` holds the
        final coefficients.
    SeparationError
        Coefficients diverge (perfect or quasi-perfect separation).
    """
    X = _check_design(design, labels)
    y = np.asarray(labels, dtype=float)
    w = _weights(weights, X.shape[0])
    if penalty is not None:
        coef, info = _lasso_logistic(X, y, w, float(penalty), tol=max(tol, 1e-12),
                                     max_iter=max(max_iter, 1000))
    else:
        coef, info = _newton_logistic(X, y, w, tol, max_iter)
    return (coef, info) if return_info else coef


def _newton_logistic(X, y, w, tol, max_iter):
    coef = np.zeros(X.shape[1])
    ybar = wmean(y, w) / wmean(np.ones_like(y), w)
    if 0.0 < ybar < 1.0:
        coef[0] = np.log(ybar / (1.0 - ybar))
    else:
        raise SeparationError("labels are all identical", last_iterate=coef)
    ll = logistic_loglik(coef, X, y, w)
    for it in range(1, max_iter + 1):
        p = expit(X @ coef)
        score = wmean(X, w * (y - p))
        snorm = float(np.linalg.norm(score))
        if snorm <= tol:
            return coef, {"iterations": it - 1, "converged": True, "score_norm": snorm}
        info_mat = wgram(X, w * p * (1.0 - p))
        try:
            step = solve_checked(info_mat, score, "logistic information matrix")
        except SingularSystemError:
            if np.max(np.abs(X @ coef)) > SEPARATION_ETA / 2:
                raise SeparationError("information matrix degenerate; labels look separable",
                                      last_iterate=coef) from None
            raise
        t = 1.0
        while True:
            cand = coef + t * step
            ll_new = logistic_loglik(cand, X, y, w)
            if ll_new >= ll - 1e-15 * max(1.0, abs(ll)) or t < 1e-10:
                break
            t *= 0.5
        coef, ll = cand, ll_new
        if np.max(np.abs(X @ coef)) > SEPARATION_ETA:
            raise SeparationError("coefficient norm diverging; labels are (quasi-)separable",
                                  last_iterate=coef)
    p = expit(X @ coef)
    snorm = float(np.linalg.norm(wmean(X, w * (y - p))))
    if snorm <= tol:
        return coef, {"iterations": max_iter, "converged": True, "score_norm": snorm}
    raise ConvergenceError(f"logistic Newton did not converge in {max_iter} iterations "
                           f"(score norm {snorm:.3g})", last_iterate=coef)


def fit_ols(design, response, weights=None, return_info=False):
    """Weighted least squares through the normal equations.

    Raises :class:`~peeriv.errors.SingularSystemError` (a ``LinAlgError``)
    when the design is rank deficient.
    """
    X = np.asarray(design, dtype=float)
    yv = np.asarray(response, dtype=float)
    if X.ndim != 2 or yv.shape != (X.shape[0],):
        raise ValueError("design and response shapes disagree")
    w = _weights(weights, X.shape[0])
    coef = solve_checked(wgram(X, w), wmean(X, w * yv), "least-squares design")
    # one refinement step tightens the residual orthogonality
    resid = yv - X @ coef
    coef = coef + solve_checked(wgram(X, w), wmean(X, w * resid), "least-squares design")
    if return_info:
        resid = yv - X @ coef
        return coef, {"iterations": 1, "converged": True,
                      "orthogonality": float(np.max(np.abs(wmean(X, w * resid))))}
    return coef


# -- lasso -------------------------------------------------------------------

def _standardize(X, w):
    """Centre and scale the non-intercept columns; return (Z, centre, scale)."""
    Z = X[:, 1:]
    wsum = float(np.sum(w))
    centre = np.einsum("n,nj->j", w, Z) / wsum
    Zc = Z - centre
    scale = np.sqrt(np.einsum("n,nj->j", w, Zc * Zc) / wsum)
    scale[scale == 0] = 1.0
    return Zc / scale, centre, scale


def _unstandardize(a, b, centre, scale):
    beta = b / scale
    return np.concatenate([[a - float(centre @ beta)], beta])


def _soft(v, lam):
    return np.sign(v) * max(abs(v) - lam, 0.0)


def _cd_wls(Z, z, W, lam, a, b, tol, max_sweeps):
    """Coordinate descent for (1/2) sum W (z - a - Z b)^2 / sum W + lam |b|_1."""
    Wsum = float(np.sum(W))
    denom = np.einsum("n,nj->j", W, Z * Z) / Wsum
    r = z - a - Z @ b
    for _ in range(max_sweeps):
        delta_max = 0.0
        da = float(np.einsum("n,n->", W, r)) / Wsum
        a += da
        r -= da
        delta_max = abs(da)
        for j in range(Z.shape[1]):
            if denom[j] == 0:
                continue
            zj = Z[:, j]
            rho = float(np.einsum("n,n->", W * zj, r)) / Wsum + denom[j] * b[j]
            new = _soft(rho, lam) / denom[j]
            if new != b[j]:
                r -= zj * (new - b[j])
                delta_max = max(delta_max, abs(new - b[j]))
                b[j] = new
        if delta_max < tol:
            break
    return a, b


def _lasso_logistic_std(Z, y, w, lam, a, b, tol, max_iter):
    for it in range(1, max_iter + 1):
        eta = a + Z @ b
        p = expit(eta)
        W = w * np.clip(p * (1 - p), 1e-10, None)
        zt = eta + (y - p) / np.clip(p * (1 - p), 1e-10, None)
        # _cd_wls normalises by sum(W); rescale so the penalty applies to the
        # mean log-likelihood (normalised by sum(w)) as documented
        lam_w = lam * float(np.sum(w)) / float(np.sum(W))
        a_new, b_new = _cd_wls(Z, zt, W, lam_w, a, b.copy(), tol * 0.1, 1000)
        change = max(abs(a_new - a), float(np.max(np.abs(b_new - b), initial=0.0)))
        a, b = a_new, b_new
        if np.max(np.abs(a + Z @ b)) > SEPARATION_ETA:
            raise SeparationError("penalised logistic fit diverging", last_iterate=np.r_[a, b])
        if change < tol:
            return a, b, it, True
    return a, b, max_iter, False


def lasso_lambda_max(design, labels, weights=None, family="binomial"):
    """Smallest penalty that zeroes every non-intercept coefficient."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    w = _weights(weights, X.shape[0])
    Z, _, _ = _standardize(X, w)
    ybar = float(np.sum(w * y) / np.sum(w))
    g = np.einsum("n,nj->j", w * (y - ybar), Z) / np.sum(w)
    return float(np.max(np.abs(g), initial=0.0))


def _lasso_logistic(X, y, w, lam, tol, max_iter, start=None):
    Z, centre, scale = _standardize(X, w)
    ybar = float(np.sum(w * y) / np.sum(w))
    if not 0 < ybar < 1:
        raise SeparationError("labels are all identical")
    a, b = (np.log(ybar / (1 - ybar)), np.zeros(Z.shape[1])) if start is None else start
    a, b, it, ok = _lasso_logistic_std(Z, y, w, lam, a, b.copy(), tol, max_iter)
    coef = _unstandardize(a, b, centre, scale)
    if not ok:
        raise ConvergenceError("lasso logistic did not converge", last_iterate=coef)
    return coef, {"iterations": it, "converged": True, "lambda": lam, "_std": (a, b)}


def fit_lasso_ols(design, response, penalty, weights=None, tol=1e-10, max_sweeps=10000,
                  return_info=False):
    """Lasso least squares with an unpenalised intercept (first column)."""
    X = _check_design(design)
    yv = np.asarray(response, dtype=float)
    w = _weights(weights, X.shape[0])
    Z, centre, scale = _standardize(X, w)
    a, b = _cd_wls(Z, yv, w, float(penalty), 0.0, np.zeros(Z.shape[1]), tol, max_sweeps)
    coef = _unstandardize(a, b, centre, scale)
    return (coef, {"iterations": None, "converged": True, "lambda": float(penalty)}) \
        if return_info else coef


def _lambda_grid(lmax, n_lambda=30, ratio=1e-3):
    if lmax <= 0:
        return np.array([0.0])
    return lmax * np.logspace(0, np.log10(ratio), n_lambda)


def cv_lambda(design, target, family, folds=5, weights=None, n_lambda=30):
    """Penalty minimising k-fold deviance (binomial) or squared error (gaussian).

    Fold membership is ``row index mod folds`` so the choice is deterministic.
    """
    X = _check_design(design)
    y = np.asarray(target, dtype=float)
    w = _weights(weights, X.shape[0])
    n = X.shape[0]
    lmax = lasso_lambda_max(X, y, w)
    grid = _lambda_grid(lmax, n_lambda)
    fold = np.arange(n) % folds
    loss = np.zeros(len(grid))
    for k in range(folds):
        tr, te = fold != k, fold == k
        start = None
        for i, lam in enumerate(grid):
            if family == "binomial":
                try:
                    coef, info = _lasso_logistic(X[tr], y[tr], w[tr], lam, 1e-8, 1000, start)
                except (ConvergenceError, SeparationError):
                    loss[i] = np.inf
                    continue
                start = info["_std"]
                eta = X[te] @ coef
                loss[i] -= float(np.sum(w[te] * (y[te] * eta + log_expit(-eta))))
            else:
                coef = fit_lasso_ols(X[tr], y[tr], lam, w[tr], tol=1e-8)
                loss[i] += float(np.sum(w[te] * (y[te] - X[te] @ coef) ** 2))
    return float(grid[int(np.argmin(loss))])
