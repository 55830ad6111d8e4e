"""Row reductions with a fixed summation order.

BLAS-backed products may split the row dimension across threads, which makes
the last bits of a sum depend on the thread count.  ``np.einsum`` without
path optimisation runs its own single-threaded loops, so every reduction over
observations in the package goes through these helpers.
"""

import math

import numpy as np

from .errors import SingularSystemError

COND_LIMIT = 1e12


def wmean(v, w=None):
    """Mean of the columns of ``v`` (1-d or 2-d), optionally weighted by row."""
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    if v.ndim == 2:
        # rows last and contiguous: einsum's inner loop runs over observations
        vt = np.ascontiguousarray(v.T)
        if w is None:
            return np.einsum("jn->j", vt) / n
        return np.einsum("jn,n->j", vt, np.asarray(w, dtype=float)) / n
    if w is None:
        return np.einsum("n...->...", v) / n
    return np.einsum("n,n...->...", np.asarray(w, dtype=float), v) / n


def exact_mean(v):
    """Correctly rounded mean of a 1-d array.

    Used for objectives compared across line-search steps, where plain
    summation error (a few ulps times ``n``) can hide a genuine increase.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        return float(np.mean(v))  # non-finite: callers only test isfinite
    return math.fsum(v.tolist()) / v.shape[0]


def wgram(V, w=None):
    """``V' diag(w) V / n``."""
    n = V.shape[0]
    vt = np.ascontiguousarray(np.asarray(V, dtype=float).T)
    if w is None:
        return np.einsum("in,jn->ij", vt, vt) / n
    return np.einsum("in,jn->ij", vt * np.asarray(w, dtype=float), vt) / n


def solve_checked(A, b, what="linear system"):
    """Solve ``A x = b``; refuse numerically singular ``A``."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return np.zeros(0)
    try:
        sv = np.linalg.svd(A, compute_uv=False)
        cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystemError(f"{what} is singular (condition number {cond:.3g})")
    return np.linalg.solve(A, b)
