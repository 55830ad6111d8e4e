"""Bootstrap and influence-function confidence intervals, coverage bookkeeping."""

from __future__ import annotations

import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import DyadDataset, EstimandSpec
from .errors import InferenceError, PeerIVError, PreconditionError
from .estimators import EstimateReport, EstimatorConfig, estimate

STREAM_BOOTSTRAP = 2
MAX_FAILURE_RATE = 0.2
RANGE_FACTOR = 10.0


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile bootstrap summary.

    ``replicates`` holds the successful replicate estimates in replicate
    order; ``n_failed`` counts replicates that raised an estimation error
    or were excluded for exceeding ``10 x`` the observed outcome range.
    """

    replicates: np.ndarray
    se: float
    ci_lower: float
    ci_upper: float
    n_failed: int
    B: int
    level: float = 0.95
    failures: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"B": self.B, "se": self.se, "ci_lower": self.ci_lower, "ci_upper": self.ci_upper,
                "level": self.level, "n_failed": self.n_failed, "failures": dict(self.failures)}


def resample_indices(n: int, seed: int, r: int) -> np.ndarray:
    """Row indices of bootstrap replicate ``r`` (its own Philox stream)."""
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(STREAM_BOOTSTRAP, r))))
    return g.integers(0, n, size=n)


def _replicate(args):
    ds, specs, method, cfg, seed, r, nuisances = args
    boot = ds.take(resample_indices(ds.n, seed, r))
    out = []
    cache = {}
    for spec in specs:
        try:
            if callable(method):
                res = method(boot, spec)
                out.append(res.point if isinstance(res, EstimateReport) else float(res))
            else:
                nuis = None if nuisances is None else nuisances[spec]
                out.append(estimate(boot, spec, method, cfg, nuis=nuis, _pi_cache=cache).point)
        except PeerIVError as exc:
            out.append(type(exc).__name__)
    return out


def _outcome_range(ds: DyadDataset, spec: EstimandSpec) -> float:
    y = ds.y1 if spec.ego == 1 else ds.y2
    if y is None:
        y = ds.y1
    return float(np.max(y) - np.min(y))


def _summarise(values, B, level, bound):
    failures = {}
    kept = []
    for v in values:
        if isinstance(v, str):
            failures[v] = failures.get(v, 0) + 1
        elif not np.isfinite(v) or abs(v) > bound:
            failures["out_of_range"] = failures.get("out_of_range", 0) + 1
        else:
            kept.append(v)
    n_failed = B - len(kept)
    if n_failed > MAX_FAILURE_RATE * B or len(kept) < 2:
        raise InferenceError(
            f"{n_failed} of {B} bootstrap replicates failed ({failures}); the estimator is "
            "unstable on this data -- consider a different method")
    rep = np.array(kept, dtype=float)
    rep.setflags(write=False)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(rep, [alpha, 1.0 - alpha])
    return BootstrapResult(rep, float(np.std(rep, ddof=1)), float(lo), float(hi), n_failed, B,
                           level, failures)


def _picklable(obj) -> bool:
    try:
        pickle.dumps(obj)
    except (pickle.PicklingError, AttributeError, TypeError):
        return False
    return True


def bootstrap_many(ds: DyadDataset, specs, method="mr", cfg: EstimatorConfig = EstimatorConfig(),
                   B: int = 200, seed: int = 0, workers: int = 1, nuisances=None, level=0.95):
    """Bootstrap several estimands on shared resamples.

    Every replicate refits all nuisances unless ``nuisances`` maps each spec
    to a fixed :class:`~peeriv.nuisance.NuisanceSet` of functions.  Returns
    one :class:`BootstrapResult` per spec, or the :class:`InferenceError`
    raised for that spec.
    """
    if B < 2:
        raise PreconditionError("bootstrap needs B >= 2")
    specs = list(specs)
    tasks = [(ds, specs, method, cfg, seed, r, nuisances) for r in range(B)]
    if workers > 1 and not _picklable(tasks[0]):
        workers = 1  # closures (fixed nuisances, lambdas) stay in-process; same result
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(_replicate, tasks, chunksize=max(1, B // (4 * workers))))
    else:
        values = [_replicate(t) for t in tasks]
    out = []
    for j, spec in enumerate(specs):
        bound = RANGE_FACTOR * _outcome_range(ds, spec)
        try:
            out.append(_summarise([v[j] for v in values], B, level, bound))
        except InferenceError as exc:
            out.append(exc)
    return out


def bootstrap(ds: DyadDataset, spec: EstimandSpec, method="mr",
              cfg: EstimatorConfig = EstimatorConfig(), B: int = 200, seed: int = 0,
              workers: int = 1, nuis=None, level=0.95) -> BootstrapResult:
    """Nonparametric bootstrap over dyads with a percentile interval.

    ``method`` is an estimator name or a callable ``(ds, spec)`` returning a
    report or a number.  Replicate ``r`` draws its rows from a stream derived
    from ``(seed, r)``, so the result does not depend on ``workers``.

    Raises
    ------
    InferenceError
        If more than 20% of the replicates fail or are excluded.
    """
    res = bootstrap_many(ds, [spec], method, cfg, B, seed, workers,
                         None if nuis is None else {spec: nuis}, level)[0]
    if isinstance(res, Exception):
        raise res
    return res


def plugin_ci(report: EstimateReport, level: float = 0.95):
    """Normal interval ``point -/+ z se_plugin`` from the influence values."""
    if report.eif_values is None or report.eif_values.size == 0 or report.se_plugin is None:
        raise PreconditionError(f"method {report.method!r} provides no influence-function values")
    if not 0.0 < level < 1.0:
        raise PreconditionError("level must lie in (0, 1)")
    half = float(norm.ppf(0.5 + level / 2.0)) * report.se_plugin
    return report.point - half, report.point + half


def coverage(replications, truth: float) -> float:
    """Fraction of ``(point, (lower, upper))`` pairs whose interval holds ``truth``."""
    replications = list(replications)
    if not replications:
        raise PreconditionError("coverage needs at least one replication")
    hits = sum(lo <= truth <= hi for _, (lo, hi) in replications)
    return hits / len(replications)
