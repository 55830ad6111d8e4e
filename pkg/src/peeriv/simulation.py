"""Reference data-generating process and Monte Carlo harness.

The process has two uniform covariates on ``[-1, 1]``, two latent uniform
confounders on ``(0, 0.5]``, logistic instruments
``pr(Zj = 1 | X) = expit(0.25 X1 + 0.25 X2)``, conditionally independent
treatments ``pr(Dj = 1 | Zj, X, U) = expit(-1 + 2 Zj - 0.25 X1 - 0.25 X2 +
0.05 U1 - 0.05 U2)`` and linear potential outcomes with standard normal
errors.  Unit 2's outcomes use the same four models with the roles of the
two treatments exchanged, so spillover effects for either ego have a known
truth.  The average effects are ``DTE(1) = 7, DTE(0) = 5, STE(1) = 3,
STE(0) = 1`` and ``ITE = 2``.

Randomness comes from numpy's counter-based ``Philox`` generator keyed by
``SeedSequence(seed, spawn_key=(stream, ...))``; see the ``STREAM_*``
constants.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .basis import BasisSpec
from .data import DyadDataset, EstimandSpec, Target, to_direct_form
from .errors import ConfigurationError, PeerIVError
from .estimators import EstimatorConfig, estimate, estimate_many
from .inference import bootstrap_many, coverage, plugin_ci
from .nuisance import NuisanceConfig, NuisanceSet

STREAM_DATA = 0
STREAM_ERRORS = 1
STREAM_BOOTSTRAP = 2
STREAM_MC_DATA = 3
STREAM_MC_BOOTSTRAP = 4

PATTERNS = ("none", "only_ipw_correct", "only_g_correct", "only_reg_correct")
TRUTH = {"dte1": 7.0, "dte0": 5.0, "ste1": 3.0, "ste0": 1.0, "ite": 2.0}

# outcome model coefficients (intercept, x1, x2) indexed by (own, other) treatment
OUTCOME = {
    (1, 1): (6.0, 6.0, 5.0),
    (1, 0): (3.0, 4.0, 2.0),
    (0, 1): (-1.0, 2.0, 1.5),
    (0, 0): (-2.0, 1.0, 0.5),
}
U_LOADING = 2.0


def rng(seed: int, *key) -> np.random.Generator:
    """Philox generator for ``seed`` and the integer stream key ``key``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def derive_seed(seed: int, *key) -> int:
    """A 63-bit child seed, independent of how many siblings are drawn."""
    state = np.random.SeedSequence(seed, spawn_key=key).generate_state(2, np.uint32)
    return int(state[0]) << 31 ^ int(state[1])


@dataclass(frozen=True)
class DgpConfig:
    n: int
    seed: int = 0
    misspec_pattern: str = "none"

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 100:
            raise ConfigurationError("n must be an integer >= 100")
        if self.misspec_pattern not in PATTERNS:
            raise ConfigurationError(f"misspec_pattern must be one of {PATTERNS}")


def instrument_prob(X):
    X = np.asarray(X, dtype=float)
    return expit(0.25 * X[..., 0] + 0.25 * X[..., 1])


def treatment_prob(z, X, U):
    """``m(z, X, U)``; broadcasts over leading axes."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    return expit(-1.0 + 2.0 * z - 0.25 * X[..., 0] - 0.25 * X[..., 1]
                 + 0.05 * U[..., 0] - 0.05 * U[..., 1])


def outcome_mean(own, other, X, U):
    a, b1, b2 = OUTCOME[(own, other)]
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    return a + b1 * X[..., 0] + b2 * X[..., 1] + U_LOADING * (U[..., 0] + U[..., 1])


@dataclass(frozen=True)
class FullDraw:
    """A simulated sample together with its latent variables."""

    data: DyadDataset
    u: np.ndarray
    cell_probs: np.ndarray
    potential_y1: dict = field(default_factory=dict)
    potential_y2: dict = field(default_factory=dict)


def generate_full(cfg: DgpConfig) -> FullDraw:
    n = int(cfg.n)
    g = rng(cfg.seed, STREAM_DATA)
    X = g.uniform(-1.0, 1.0, size=(n, 2))
    # (0, 0.5]: reflect numpy's [0, 1) draw
    U = 0.5 * (1.0 - g.random(size=(n, 2)))
    pz = instrument_prob(X)
    z1 = (g.random(n) < pz).astype(np.int8)
    z2 = (g.random(n) < pz).astype(np.int8)
    m1 = treatment_prob(z1, X, U)
    m2 = treatment_prob(z2, X, U)
    cells = np.column_stack([m1 * m2, (1 - m1) * m2, m1 * (1 - m2), (1 - m1) * (1 - m2)])
    assert np.allclose(cells.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    # one multinomial draw per row over the cells (11, 01, 10, 00)
    cell = (g.random(n)[:, None] > np.cumsum(cells, axis=1)[:, :3]).sum(axis=1)
    d1 = np.isin(cell, (0, 2)).astype(np.int8)
    d2 = np.isin(cell, (0, 1)).astype(np.int8)
    e = rng(cfg.seed, STREAM_ERRORS).standard_normal(size=(n, 8))
    keys = [(1, 1), (1, 0), (0, 1), (0, 0)]
    # unit 1: own treatment d1, other d2; unit 2 mirrors with (d2, d1)
    y1_pot = {k: outcome_mean(k[0], k[1], X, U) + e[:, i] for i, k in enumerate(keys)}
    y2_pot = {k: outcome_mean(k[0], k[1], X, U) + e[:, 4 + i] for i, k in enumerate(keys)}
    y1 = np.select([(d1 == a) & (d2 == b) for a, b in keys], [y1_pot[k] for k in keys])
    y2 = np.select([(d2 == a) & (d1 == b) for a, b in keys], [y2_pot[k] for k in keys])
    ds = DyadDataset(X, z1, z2, d1, d2, y1, y2)
    return FullDraw(ds, U, cells, y1_pot, y2_pot)


def generate(cfg: DgpConfig) -> DyadDataset:
    """Draw ``cfg.n`` dyads; bit-identical for a given seed on every platform."""
    return generate_full(cfg).data


def true_values():
    """``(DTE1, DTE0, STE1, STE0, ITE)`` of the reference process."""
    return (TRUTH["dte1"], TRUTH["dte0"], TRUTH["ste1"], TRUTH["ste0"], TRUTH["ite"])


# -- nuisance oracle ---------------------------------------------------------

def _u_nodes(order=12):
    t, w = np.polynomial.legendre.leggauss(order)
    u = 0.25 * (t + 1.0)
    w = 0.25 * w / 0.5  # density 2 on (0, 0.5]
    U1, U2 = np.meshgrid(u, u, indexing="ij")
    W = np.outer(w, w)
    return np.column_stack([U1.ravel(), U2.ravel()]), W.ravel()


def true_conditional_effect(target: Target, d: int, X):
    """``omega(x)`` of the reference process (linear, no latent dependence)."""
    X = np.asarray(X, dtype=float)
    if target is Target.DTE:
        hi, lo = OUTCOME[(1, d)], OUTCOME[(0, d)]
    else:
        hi, lo = OUTCOME[(d, 1)], OUTCOME[(d, 0)]
    c = np.subtract(hi, lo)
    return c[0] + c[1] * X[:, 0] + c[2] * X[:, 1]


def true_nuisances(spec: EstimandSpec) -> NuisanceSet:
    """Exact nuisances of the direct form of ``spec``, integrating out U.

    The latent confounders are integrated by tensor Gauss-Legendre
    quadrature (exact to rounding for these smooth integrands); the peer
    instrument is summed over its two values.
    """
    if spec.target is Target.ITE:
        raise ConfigurationError("oracle nuisances are defined per direct or spillover effect")
    d = spec.d
    nodes, weights = _u_nodes()
    spillover = spec.target is Target.STE

    cache = {}

    def parts(X):
        X = np.ascontiguousarray(X, dtype=float)
        key = (X.shape, hashlib.sha1(X.tobytes()).digest())
        if key not in cache:
            cache.clear()
            cache[key] = _parts(X)
        return cache[key]

    def _parts(X):
        Xb = X[:, None, :]
        Ub = nodes[None, :, :]
        pz = instrument_prob(X)[:, None]
        # peer treatment at level d, averaged over the peer instrument
        q = sum(pzv * (treatment_prob(zv, Xb, Ub) if d == 1 else 1 - treatment_prob(zv, Xb, Ub))
                for zv, pzv in ((1, pz), (0, 1 - pz)))
        own = {z: treatment_prob(z, Xb, Ub) for z in (0, 1)}
        if spillover:
            y_own = outcome_mean(d, 1, Xb, Ub)
            y_not = outcome_mean(d, 0, Xb, Ub)
        else:
            y_own = outcome_mean(1, d, Xb, Ub)
            y_not = outcome_mean(0, d, Xb, Ub)
        mu = {z: own[z] * q for z in (0, 1)}
        eta = {z: (own[z] * y_own + (1 - own[z]) * y_not) * q for z in (0, 1)}
        avg = lambda a: np.einsum("nk,k->n", a, weights)
        return {k: {z: avg(v[z]) for z in (0, 1)} for k, v in (("mu", mu), ("eta", eta))}

    def mu(X):
        return parts(X)["mu"][0]

    def eta(X):
        return parts(X)["eta"][0]

    def delta(X):
        p = parts(X)["mu"]
        return p[1] - p[0]

    def omega(X):
        return true_conditional_effect(spec.target, d, X)

    return NuisanceSet(instrument_prob, mu, eta, delta, omega, meta={"learner": "oracle"})


WRONG_DELTA = 0.3


def _zero(X):
    return np.zeros(np.asarray(X).shape[0])


def _wrong_delta(X):
    return np.full(np.asarray(X).shape[0], WRONG_DELTA)


def _wrong_pi(X):
    X = np.asarray(X, dtype=float)
    return expit(-0.75 * (X[:, 0] + X[:, 1]))


def corrupted_nuisances(spec: EstimandSpec, pattern: str) -> NuisanceSet:
    """Oracle nuisances with every function outside the named submodel replaced.

    ================  ===============  ==================================
    pattern           kept             replaced
    ================  ===============  ==================================
    only_ipw_correct  pi, delta        mu, eta, omega -> 0
    only_g_correct    pi, omega        mu, eta -> 0, delta -> 0.3
    only_reg_correct  mu, eta, omega   pi -> expit(-0.75 (x1 + x2)),
                                       delta -> 0.3
    ================  ===============  ==================================
    """
    t = true_nuisances(spec)
    meta = {"learner": "oracle", "pattern": pattern}
    if pattern == "none":
        return t
    if pattern == "only_ipw_correct":
        return NuisanceSet(t.pi1, _zero, _zero, t.delta, _zero, meta)
    if pattern == "only_g_correct":
        return NuisanceSet(t.pi1, _zero, _zero, _wrong_delta, t.omega, meta)
    if pattern == "only_reg_correct":
        return NuisanceSet(_wrong_pi, t.mu, t.eta, _wrong_delta, t.omega, meta)
    raise ConfigurationError(f"unknown pattern {pattern!r}")


# -- Monte Carlo -------------------------------------------------------------

MC_METHODS = ("parametric", "lasso", "sieve", "wald", "ipw", "g", "reg", "mr")
CI_KINDS = ("bootstrap", "plugin", "none")


@dataclass(frozen=True)
class McSettings:
    reps: int
    ns: tuple
    methods: tuple = ("parametric",)
    seed: int = 0
    estimands: tuple = ("dte1", "dte0", "ste1", "ste0")
    B: int = 200
    ci: str = "bootstrap"
    pattern: str = "none"
    basis: BasisSpec = BasisSpec()
    nuisance: NuisanceConfig = NuisanceConfig()

    def __post_init__(self):
        if self.reps < 2:
            raise ConfigurationError("reps must be at least 2")
        if not self.ns or any(int(n) != n or n < 100 for n in self.ns):
            raise ConfigurationError("every sample size must be an integer >= 100")
        bad = [m for m in self.methods if m not in MC_METHODS]
        if bad or not self.methods:
            raise ConfigurationError(f"methods must be chosen from {MC_METHODS}")
        for e in self.estimands:
            if e not in TRUTH:
                raise ConfigurationError(f"unknown estimand {e!r}")
        if self.ci not in CI_KINDS:
            raise ConfigurationError(f"ci must be one of {CI_KINDS}")
        if self.ci == "bootstrap" and self.B < 2:
            raise ConfigurationError("bootstrap needs B >= 2")
        if self.pattern not in PATTERNS:
            raise ConfigurationError(f"pattern must be one of {PATTERNS}")
        if self.pattern != "none" and ("ite" in self.estimands or "lasso" in self.methods):
            raise ConfigurationError("corruption patterns apply to oracle nuisances of "
                                     "direct and spillover effects only")


def _method_call(method, settings: McSettings):
    """(estimator name, EstimatorConfig) for a Monte Carlo method label."""
    base = EstimatorConfig(settings.nuisance, settings.basis)
    if method == "parametric":
        return "mr", EstimatorConfig(NuisanceConfig(**{**settings.nuisance.__dict__,
                                                       "learner": "parametric"}), settings.basis)
    if method == "lasso":
        return "mr", EstimatorConfig(NuisanceConfig(**{**settings.nuisance.__dict__,
                                                       "learner": "lasso"}), settings.basis)
    return method, base


def _run_method(ds, specs, method, settings, boot_seed):
    name, ecfg = _method_call(method, settings)
    oracle = None
    if settings.pattern != "none" and name != "sieve":
        oracle = {s: corrupted_nuisances(s, settings.pattern) for s in specs}
    if oracle is None:
        reports = estimate_many(ds, specs, name, ecfg)
    else:
        reports = []
        for s in specs:
            try:
                reports.append(estimate(ds, s, name, ecfg, nuis=oracle[s]))
            except PeerIVError as exc:
                reports.append(exc)
    out = []
    cis = [None] * len(specs)
    if settings.ci == "bootstrap":
        boots = bootstrap_many(ds, specs, name, ecfg, settings.B, boot_seed, nuisances=oracle)
        cis = [None if isinstance(b, Exception) else (b.ci_lower, b.ci_upper) for b in boots]
    for spec, rep, ci in zip(specs, reports, cis):
        if isinstance(rep, Exception):
            out.append((float("nan"), None, type(rep).__name__))
            continue
        if settings.ci == "plugin":
            ci = plugin_ci(rep, 0.95) if rep.eif_values.size else None
        out.append((rep.point, ci, None))
    return out


def _mc_task(args):
    settings, n, r = args
    ds = generate(DgpConfig(n, derive_seed(settings.seed, STREAM_MC_DATA, n, r)))
    specs = [EstimandSpec.parse(e) for e in settings.estimands]
    boot_seed = derive_seed(settings.seed, STREAM_MC_BOOTSTRAP, n, r)
    return {m: _run_method(ds, specs, m, settings, boot_seed) for m in settings.methods}


@dataclass(frozen=True)
class McRow:
    estimand: str
    method: str
    n: int
    bias: float
    sd: float
    cp: float
    failures: int
    reps: int
    points: tuple = ()

    @property
    def se_bias(self) -> float:
        """Monte Carlo standard error of ``bias``."""
        ok = self.reps - self.failures
        return self.sd / math.sqrt(ok) if ok > 0 else float("nan")


@dataclass(frozen=True)
class McTable:
    rows: tuple
    settings: McSettings = None

    def row(self, estimand, method, n) -> McRow:
        for r in self.rows:
            if (r.estimand, r.method, r.n) == (estimand, method, n):
                return r
        raise KeyError((estimand, method, n))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimand", "method", "n", "bias", "sd", "cp", "failures"])
        for r in self.rows:
            w.writerow([r.estimand, r.method, r.n, _fmt(r.bias), _fmt(r.sd), _fmt(r.cp), r.failures])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_text(self) -> str:
        """Aligned table: one block per estimand, one line per sample size,
        ``Bias SD CP`` per method."""
        methods = list(dict.fromkeys(r.method for r in self.rows))
        ns = sorted({r.n for r in self.rows})
        lines = []
        head = f"{'':>8} " + " ".join(f"{m:^23}" for m in methods)
        sub = f"{'n':>8} " + " ".join(f"{'Bias':>7} {'SD':>7} {'CP':>7}" for _ in methods)
        for e in dict.fromkeys(r.estimand for r in self.rows):
            lines += [e.upper(), head, sub]
            for n in ns:
                cells = []
                for m in methods:
                    try:
                        r = self.row(e, m, n)
                        cells.append(f"{r.bias:7.2f} {r.sd:7.2f} {_cp(r.cp):>7}")
                    except KeyError:
                        cells.append(f"{'':>23}")
                lines.append(f"{n:>8} " + " ".join(cells))
            lines.append("")
        return "\n".join(lines)

    def summary_lines(self):
        return [f"{r.estimand} {r.method} n={r.n}: bias={r.bias:+.4f} sd={r.sd:.4f} "
                f"cp={_cp(r.cp)} failures={r.failures}/{r.reps}" for r in self.rows]


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _cp(v):
    return "-" if v is None or math.isnan(v) else f"{v:.2f}"


def run_mc(reps: int, ns, methods=("parametric",), seed: int = 0, workers: int = 1,
           **options) -> McTable:
    """Monte Carlo study over the reference process.

    Parameters
    ----------
    reps : int
        Replications per sample size.
    ns : sequence of int
        Sample sizes.
    methods : sequence of str
        Labels from ``MC_METHODS``; ``parametric`` and ``lasso`` are the
        multiply robust estimator with the respective nuisance learner.
    seed : int
        Master seed; replication ``r`` at size ``n`` uses data and bootstrap
        streams derived from ``(seed, n, r)``.
    workers : int
        Worker processes.  Results are stored by replication index, so the
        table does not depend on this value.
    **options
        Remaining :class:`McSettings` fields (``estimands``, ``B``, ``ci``,
        ``pattern``, ``basis``, ``nuisance``).
    """
    settings = McSettings(reps=reps, ns=tuple(int(n) for n in ns), methods=tuple(methods),
                          seed=seed, **options)
    if reps < 20:
        warnings.warn(f"low-rep warning: {reps} replications give noisy bias/SD/CP",
                      RuntimeWarning, stacklevel=2)
    tasks = [(settings, n, r) for n in settings.ns for r in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_mc_task, tasks, chunksize=1))
    else:
        results = [_mc_task(t) for t in tasks]
    by_key = {(n, r): res for (_, n, r), res in zip(tasks, results)}
    rows = []
    for n in settings.ns:
        for m in settings.methods:
            for j, e in enumerate(settings.estimands):
                entries = [by_key[(n, r)][m][j] for r in range(reps)]
                rows.append(_summarise(e, m, n, entries))
    return McTable(tuple(rows), settings)


def _summarise(estimand, method, n, entries) -> McRow:
    truth = TRUTH[estimand]
    pts = np.array([p for p, _, err in entries if err is None], dtype=float)
    failures = sum(err is not None for _, _, err in entries)
    cis = [ci for _, ci, err in entries if err is None and ci is not None]
    if pts.size:
        bias = float(np.mean(pts) - truth)
        sd = float(np.std(pts, ddof=1)) if pts.size > 1 else float("nan")
    else:
        bias = sd = float("nan")
    cp = coverage([(None, ci) for ci in cis], truth) if cis else float("nan")
    return McRow(estimand, method, n, bias, sd, cp, failures, len(entries),
                 tuple(p for p, _, _ in entries))


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
