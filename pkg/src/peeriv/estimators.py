"""Point estimators of direct, spillover and interaction effects.

Every estimator maps ``(dataset, estimand, nuisances)`` to an
:class:`EstimateReport`.  The dataset is given in its original layout; the
estimand decides which columns play ego and peer (see
:func:`peeriv.data.to_direct_form`), so the formulas below are written once
for the unit-1 direct effect at peer level ``d``.  With
``s = (-1)^(1-Z1)``, ``I = I(D2 = d)``:

* ``wald``  -- ``P_n omega(X)``
* ``ipw``   -- ``P_n s I Y1 / (pi delta)``
* ``g``     -- ``P_n omega_g(X)``, ``omega_g`` solving the ``pi``-weighted moment
* ``reg``   -- ``P_n omega_r(X)``, ``omega_r`` solving the ``(mu, eta)``-offset moment
* ``mr``    -- ``P_n [s/(pi delta) {I Y1 - eta - D1 I omega + mu omega} + omega]``
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._linalg import wmean
from .basis import BasisSpec
from .data import (DyadDataset, EstimandSpec, Target, augment_with_peer_instrument,
                   indicator_columns, to_direct_form)
from .errors import (ConfigurationError, PeerIVError, PreconditionError, WeakInstrumentError,
                     relabel)
from .nuisance import (NuisanceConfig, NuisanceSet, fit_direct, fit_pi, index_design,
                       solve_linear_moment)

METHODS = ("wald", "ipw", "g", "reg", "mr", "sieve")
DELTA_FLOOR = 1e-3
DELTA_MEAN_FLOOR = 0.02


@dataclass(frozen=True)
class EstimateReport:
    """Result of one estimator run.

    ``eif_values`` holds the centred per-row influence-function values for
    methods that define one (``mr``, and ``ite`` built from ``mr``) and is
    empty otherwise.
    """

    estimand: EstimandSpec
    method: str
    point: float
    n: int
    eif_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    se_plugin: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)
    ci: Optional[dict] = None
    bootstrap: Optional[dict] = None

    def to_dict(self) -> dict:
        out = {
            "estimand": self.estimand.as_dict(),
            "method": self.method,
            "point": self.point,
            "se_plugin": self.se_plugin,
            "ci": self.ci,
            "n": self.n,
            "diagnostics": _jsonable(self.diagnostics),
        }
        if self.bootstrap is not None:
            out["bootstrap"] = _jsonable(self.bootstrap)
        return out

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=False, allow_nan=False)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def plugin_se(eif_values) -> Optional[float]:
    """``sqrt(var(eif) / n)`` with the unbiased sample variance."""
    e = np.asarray(eif_values, dtype=float)
    if e.size < 2:
        return None
    centred = e - wmean(e)
    return float(math.sqrt(wmean(centred * centred) * e.size / (e.size - 1) / e.size))


# -- shared pieces -----------------------------------------------------------

def _prepare(ds: DyadDataset, spec: EstimandSpec):
    if spec.target is Target.ITE:
        raise PreconditionError("use estimate_ite for the interaction effect")
    return to_direct_form(ds, spec)


def _diagnostics(nuis: NuisanceSet, pred: dict) -> dict:
    delta = pred["delta"]
    diag = {
        "mean_delta": float(wmean(delta)),
        "min_abs_delta": float(np.min(np.abs(delta))),
        "weak_iv": bool(abs(wmean(delta)) < DELTA_MEAN_FLOOR or np.min(np.abs(delta)) < DELTA_FLOOR),
        "trimmed": nuis.meta.get("trimmed", 0),
        "learner": nuis.meta.get("learner"),
    }
    if "converged" in nuis.meta:
        diag["converged"] = nuis.meta["converged"]
    return diag


def check_weak_iv(delta) -> None:
    """Abort when ``delta`` is too close to zero for stable weighting."""
    delta = np.asarray(delta, dtype=float)
    m = float(wmean(delta))
    if abs(m) < DELTA_MEAN_FLOOR:
        raise WeakInstrumentError(
            f"weak instrument: |mean delta| = {abs(m):.3g} < {DELTA_MEAN_FLOOR}")
    low = float(np.min(np.abs(delta)))
    if low < DELTA_FLOOR:
        raise WeakInstrumentError(
            f"weak instrument: min |delta(x)| = {low:.3g} below the floor {DELTA_FLOOR}")


def _report(spec, method, point, n, diag, eif=None):
    if eif is None:
        return EstimateReport(spec, method, float(point), n, diagnostics=diag)
    eif = np.asarray(eif, dtype=float)
    eif.setflags(write=False)
    return EstimateReport(spec, method, float(point), n, eif_values=eif,
                          se_plugin=plugin_se(eif), diagnostics=diag)


# -- the five estimators -----------------------------------------------------

def estimate_wald(ds: DyadDataset, spec: EstimandSpec, nuis: NuisanceSet) -> EstimateReport:
    """Sample mean of the fitted conditional effect ``omega``."""
    dd = _prepare(ds, spec)
    pred = nuis.predict(dd)
    return _report(spec, "wald", wmean(pred["omega"]), dd.n, _diagnostics(nuis, pred))


def estimate_ipw(ds: DyadDataset, spec: EstimandSpec, nuis: NuisanceSet) -> EstimateReport:
    """Inverse-propensity and inverse-``delta`` weighted outcome mean."""
    dd = _prepare(ds, spec)
    pred = nuis.predict(dd)
    check_weak_iv(pred["delta"])
    s, w_num, _ = indicator_columns(dd, spec.d)
    point = wmean(s * w_num / (pred["pi"] * pred["delta"]))
    return _report(spec, "ipw", point, dd.n, _diagnostics(nuis, pred))


def estimate_g(ds: DyadDataset, spec: EstimandSpec, nuis: NuisanceSet,
               cfg: NuisanceConfig = NuisanceConfig()) -> EstimateReport:
    """Mean of ``omega`` refitted from ``pi`` alone.

    Solves ``P_n[s/pi I (Y1 - D1 omega(X)) x~] = 0`` over linear ``omega``.
    """
    dd = _prepare(ds, spec)
    pred = nuis.predict(dd)
    s, w_num, w_den = indicator_columns(dd, spec.d)
    V = index_design(dd.x, cfg)
    xi, info = solve_linear_moment(V, s / pred["pi"], w_num, w_den, "g-moment system")
    diag = dict(_diagnostics(nuis, pred), moment_norm=info["moment_norm"])
    return _report(spec, "g", wmean(V @ xi), dd.n, diag)


def estimate_reg(ds: DyadDataset, spec: EstimandSpec, nuis: NuisanceSet,
                 cfg: NuisanceConfig = NuisanceConfig()) -> EstimateReport:
    """Mean of ``omega`` refitted from ``(mu, eta)`` alone.

    Solves ``P_n[s x~ {I Y1 - eta - (D1 I - mu) omega(X)}] = 0``; the
    instrument ``s x~`` carries no propensity weights.
    """
    dd = _prepare(ds, spec)
    pred = nuis.predict(dd)
    s, w_num, w_den = indicator_columns(dd, spec.d)
    V = index_design(dd.x, cfg)
    xi, info = solve_linear_moment(V, s, w_num - pred["eta"], w_den - pred["mu"],
                                   "reg-moment system")
    diag = dict(_diagnostics(nuis, pred), moment_norm=info["moment_norm"])
    return _report(spec, "reg", wmean(V @ xi), dd.n, diag)


def mr_terms(dd: DyadDataset, d: int, pred: dict):
    """Per-row uncentred influence terms of the multiply robust estimator."""
    s, w_num, w_den = indicator_columns(dd, d)
    om = pred["omega"]
    resid = w_num - pred["eta"] - w_den * om + pred["mu"] * om
    return s * resid / (pred["pi"] * pred["delta"]) + om


def estimate_mr(ds: DyadDataset, spec: EstimandSpec, nuis: NuisanceSet) -> EstimateReport:
    """Multiply robust estimator; ``eif_values`` are the centred terms."""
    dd = _prepare(ds, spec)
    pred = nuis.predict(dd)
    check_weak_iv(pred["delta"])
    terms = mr_terms(dd, spec.d, pred)
    point = wmean(terms)
    return _report(spec, "mr", point, dd.n, _diagnostics(nuis, pred), eif=terms - point)


ESTIMATORS = {
    "wald": estimate_wald,
    "ipw": estimate_ipw,
    "g": estimate_g,
    "reg": estimate_reg,
    "mr": estimate_mr,
}


def combine_ite(r1: EstimateReport, r0: EstimateReport, spec: EstimandSpec,
                mode: str = "difference") -> EstimateReport:
    """Interaction effect as the difference of the two direct-effect reports."""
    point = r1.point - r0.point
    diag = {"mode": mode, "dte1": r1.diagnostics, "dte0": r0.diagnostics,
            "dte1_point": r1.point, "dte0_point": r0.point}
    if r1.eif_values.size and r0.eif_values.size:
        eif = r1.eif_values - r0.eif_values
        eif.setflags(write=False)
        return EstimateReport(spec, r1.method, point, r1.n, eif_values=eif,
                              se_plugin=plugin_se(eif), diagnostics=diag)
    return EstimateReport(spec, r1.method, point, r1.n, diagnostics=diag)


# -- fitting + dispatch ------------------------------------------------------

ITE_MODES = ("difference", "prop2")


@dataclass(frozen=True)
class EstimatorConfig:
    """Everything an estimator run needs besides the data.

    ``ite_mode`` selects how the interaction effect is formed:
    ``difference`` subtracts the two direct effects, ``prop2`` refits every
    nuisance with the peer instrument as an extra covariate first.
    """

    nuisance: NuisanceConfig = NuisanceConfig()
    basis: BasisSpec = BasisSpec()
    ite_mode: str = "difference"

    def __post_init__(self):
        if self.ite_mode not in ITE_MODES:
            raise ConfigurationError(f"ite_mode must be one of {ITE_MODES}")


def _run(dd, spec_direct, method, cfg, nuis=None, pi_cache=None):
    """One direct-form estimate; ``spec_direct`` has ego 1 and a DTE target."""
    if method == "sieve":
        from .sieve import estimate_sieve
        return estimate_sieve(dd, spec_direct, cfg.basis)
    if method not in ESTIMATORS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
    if nuis is None:
        dd.check_overlap()
        pi_fit = None
        if pi_cache is not None:
            key = dd.z1.tobytes()
            if key not in pi_cache:
                pi_cache[key] = _fit_step1(dd, cfg.nuisance)
            pi_fit = pi_cache[key]
        nuis = fit_direct(dd, spec_direct.d, cfg.nuisance, pi_fit=pi_fit)
    fn = ESTIMATORS[method]
    if method in ("g", "reg"):
        return fn(dd, spec_direct, nuis, cfg.nuisance)
    return fn(dd, spec_direct, nuis)


def _fit_step1(dd, ncfg):
    try:
        return fit_pi(dd, ncfg)
    except PeerIVError as exc:
        raise relabel(exc, "step 1 (pi)") from exc


def _relabel_spec(report: EstimateReport, spec: EstimandSpec) -> EstimateReport:
    return replace(report, estimand=spec)


def estimate(ds: DyadDataset, spec: EstimandSpec, method: str = "mr",
             cfg: EstimatorConfig = EstimatorConfig(), nuis=None, _pi_cache=None) -> EstimateReport:
    """Fit the nuisances (unless given) and run ``method`` for ``spec``.

    ``nuis`` may be a :class:`NuisanceSet` aligned to the direct form of
    ``(ds, spec)``; for the interaction effect it is a pair ``(nuis_d1,
    nuis_d0)``.
    """
    if spec.target is Target.ITE:
        return estimate_ite(ds, method, nuis, cfg, ego=spec.ego, _pi_cache=_pi_cache)
    dd = to_direct_form(ds, spec)
    direct = EstimandSpec(Target.DTE, spec.d, 1)
    return _relabel_spec(_run(dd, direct, method, cfg, nuis, _pi_cache), spec)


def estimate_many(ds: DyadDataset, specs, method: str = "mr",
                  cfg: EstimatorConfig = EstimatorConfig()) -> list:
    """:func:`estimate` for several estimands, fitting each propensity once.

    Results are returned in the order of ``specs``; an estimand whose run
    raises a package error yields the exception object instead.
    """
    cache = {}
    out = []
    for spec in specs:
        try:
            out.append(estimate(ds, spec, method, cfg, _pi_cache=cache))
        except PeerIVError as exc:
            out.append(exc)
    return out


def estimate_ite(ds: DyadDataset, method: str = "mr", nuis_pair=None,
                 cfg: EstimatorConfig = EstimatorConfig(), mode: Optional[str] = None,
                 ego: int = 1, _pi_cache=None) -> EstimateReport:
    """Interaction effect ``DTE(d=1) - DTE(d=0)``.

    In ``difference`` mode the two direct-effect estimates are computed as
    usual and subtracted, so the result equals their difference exactly.  In
    ``prop2`` mode the peer instrument is appended to the covariates before
    any nuisance is fitted (it then acts as a conditioning variable rather
    than an instrument).
    """
    mode = cfg.ite_mode if mode is None else mode
    if mode not in ITE_MODES:
        raise ConfigurationError(f"ite mode must be one of {ITE_MODES}")
    spec = EstimandSpec(Target.ITE, None, ego)
    dd = to_direct_form(ds, EstimandSpec(Target.DTE, 1, ego))
    if mode == "prop2":
        if nuis_pair is not None:
            raise ConfigurationError("prop2 mode refits its own nuisances")
        dd = augment_with_peer_instrument(dd)
    n1, n0 = nuis_pair if nuis_pair is not None else (None, None)
    cache = {} if _pi_cache is None else _pi_cache
    r1 = _run(dd, EstimandSpec(Target.DTE, 1, 1), method, cfg, n1, cache)
    r0 = _run(dd, EstimandSpec(Target.DTE, 0, 1), method, cfg, n0, cache)
    return combine_ite(r1, r0, spec, mode)
