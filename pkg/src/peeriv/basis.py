"""Polynomial bases shared by the sieve estimator and the lasso learner."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from ._linalg import wmean
from .errors import ConfigurationError


def monomial_exponents(p, degree, binary=(), exclude=()):
    """Index tuples of all monomials of total degree <= ``degree`` in ``p`` variables.

    Ordered by degree, then lexicographically: for ``p=2, degree=2`` this is
    ``(), (0,), (1,), (0, 0), (0, 1), (1, 1)``.  Powers above one of a
    column listed in ``binary`` are dropped (they duplicate lower terms), as
    is every monomial involving a column listed in ``exclude``.
    """
    out = []
    for k in range(degree + 1):
        for idx in combinations_with_replacement(range(p), k):
            if any(idx.count(j) > 1 for j in binary) or any(j in idx for j in exclude):
                continue
            out.append(idx)
    return out


def polynomial_features(X, degree, binary=(), exclude=()):
    """Evaluate every monomial of :func:`monomial_exponents` on the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    cols = []
    for idx in monomial_exponents(X.shape[1], degree, binary, exclude):
        c = np.ones(X.shape[0])
        for j in idx:
            c = c * X[:, j]
        cols.append(c)
    return np.column_stack(cols)


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial sieve basis: all monomials up to ``degree``, constant first."""

    kind: str = "polynomial"
    degree: int = 2
    standardize: bool = True

    def __post_init__(self):
        if self.kind != "polynomial":
            raise ConfigurationError(f"unsupported basis kind {self.kind!r}")
        if not 0 <= self.degree <= 6:
            raise ConfigurationError("basis degree must be between 0 and 6")

    def size(self, p: int) -> int:
        """Number of basis functions ``K`` for ``p`` covariates."""
        return math.comb(p + self.degree, self.degree)


@dataclass(frozen=True)
class Basis:
    """Evaluable basis with the standardisation frozen at construction."""

    spec: BasisSpec
    centre: np.ndarray
    scale: np.ndarray
    binary: tuple = ()
    constant: tuple = ()

    @property
    def K(self) -> int:
        return len(self.terms())

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        return polynomial_features((X - self.centre) / self.scale, self.spec.degree, self.binary,
                                   self.constant)

    def terms(self):
        return monomial_exponents(self.centre.shape[0], self.spec.degree, self.binary,
                                   self.constant)


def build_basis(ds, spec: BasisSpec) -> Basis:
    """Basis ``v_K`` fitted to the covariates of ``ds`` (``v_K[0] = 1``).

    Columns taking only two values get no squared terms; constant columns
    are left out (the intercept already spans them).

    Raises
    ------
    ConfigurationError
        If ``K >= n / 4``.
    """
    X = ds.x
    p = X.shape[1]
    levels = [np.unique(X[:, j]).size for j in range(p)]
    binary = tuple(j for j in range(p) if levels[j] == 2)
    constant = tuple(j for j in range(p) if levels[j] == 1)
    K = len(monomial_exponents(p, spec.degree, binary, constant))
    if 4 * K >= ds.n:
        raise ConfigurationError(f"basis size K={K} must be below n/4={ds.n / 4:g}; lower the degree")
    if spec.standardize and p:
        centre = wmean(X)
        sd = np.sqrt(wmean((X - centre) ** 2))
        scale = np.where(sd > 0, sd, 1.0)
    else:
        centre, scale = np.zeros(p), np.ones(p)
        if p and np.max(np.abs(X)) > 10:
            warnings.warn("covariates exceed [-10, 10] and standardisation is off; "
                          "high-degree monomials may be badly scaled", RuntimeWarning, stacklevel=2)
    centre = np.array(centre, dtype=float)
    scale = np.array(scale, dtype=float)
    centre.setflags(write=False)
    scale.setflags(write=False)
    return Basis(spec, centre, scale, binary, constant)
