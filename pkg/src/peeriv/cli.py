"""Command-line front end: ``simulate``, ``estimate`` and ``mc-table``.

Every command writes one JSON document to stdout.  Options may also come
from a ``key = value`` file given with ``--config`` (keys are the long flag
names without dashes, ``-`` or ``_`` interchangeable); flags on the command
line win.  Exit codes: 0 success, 2 usage error, 3 estimation aborted,
4 input/output error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from .basis import BasisSpec
from .data import EstimandSpec, Target, load_csv, to_direct_form, write_csv
from .errors import ConfigurationError, ParseError, PeerIVError
from .estimators import METHODS, EstimatorConfig, estimate
from .inference import bootstrap, plugin_ci
from .nuisance import NuisanceConfig, load_nuisance_csv
from .simulation import CI_KINDS, MC_METHODS, PATTERNS, TRUTH, DgpConfig, generate, run_mc

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- option handling ---------------------------------------------------------

def _int_list(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def _str_list(text):
    return [v for v in str(text).replace(",", " ").split()]


# name -> (type, default); None default means "required" where noted
OPTIONS = {
    "simulate": {"n": (int, None), "seed": (int, None), "out": (str, None)},
    "estimate": {
        "data": (str, None), "estimand": (str, None), "method": (str, None),
        "ego": (int, 1), "bootstrap": (int, 0), "seed": (int, 0), "out": (str, None),
        "learner": (str, "parametric"), "trim_eps": (float, 0.01), "newton_tol": (float, 1e-10),
        "newton_max_iter": (int, 100), "lasso_lambda": (float, None), "lasso_folds": (int, 5),
        "lasso_degree": (int, 2), "a1_a2": (str, "intercept_plus_x"),
        "basis_degree": (int, 2), "standardize": (int, 1), "ite_mode": (str, "difference"),
        "nuisance_file": (str, None), "level": (float, 0.95), "workers": (int, 1),
    },
    "mc-table": {
        "reps": (int, None), "ns": (_int_list, None), "methods": (_str_list, None),
        "seed": (int, None), "estimands": (_str_list, ["dte1", "dte0", "ste1", "ste0"]),
        "bootstrap": (int, 200), "ci": (str, "bootstrap"), "pattern": (str, "none"),
        "basis_degree": (int, 2), "trim_eps": (float, 0.01), "workers": (int, 1),
        "out_csv": (str, None), "out_text": (str, None),
    },
}
REQUIRED = {
    "simulate": ("n", "seed", "out"),
    "estimate": ("data", "estimand", "method"),
    "mc-table": ("reps", "ns", "methods", "seed"),
}


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peeriv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "draw a dataset from the reference process",
        "estimate": "estimate one effect from a dyad CSV",
        "mc-table": "Monte Carlo bias / SD / coverage table",
    }
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=helps[cmd])
        p.add_argument("--config", help="key = value file with defaults for the flags below")
        for name in opts:
            p.add_argument("--" + name.replace("_", "-"), dest=name, default=None)
    return parser


def resolve(args) -> dict:
    """Merge defaults < config file < flags and convert types."""
    cmd = args.command
    opts = OPTIONS[cmd]
    merged = {}
    if args.config:
        try:
            fileopts = read_config(args.config)
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file: {exc}") from None
        unknown = set(fileopts) - set(opts)
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {', '.join(sorted(unknown))}")
        merged.update(fileopts)
    merged.update({k: v for k, v in vars(args).items() if k in opts and v is not None})
    out = {}
    for name, (kind, default) in opts.items():
        if name in merged:
            try:
                out[name] = kind(merged[name])
            except (TypeError, ValueError):
                raise UsageError(f"--{name.replace('_', '-')}: invalid value {merged[name]!r}") from None
        else:
            out[name] = default
    missing = [n for n in REQUIRED[cmd] if out[n] is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return out


# -- commands ----------------------------------------------------------------

def cmd_simulate(o) -> dict:
    try:
        cfg = DgpConfig(o["n"], o["seed"])
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    ds = generate(cfg)
    write_csv(ds, o["out"])
    return {"command": "simulate", "n": ds.n, "seed": o["seed"], "out": o["out"],
            "columns": ds.covariate_dim + 6}


def _estimate_settings(o):
    if o["method"] not in METHODS:
        raise UsageError(f"--method must be one of {', '.join(METHODS)}")
    if o["ego"] not in (1, 2):
        raise UsageError("--ego must be 1 or 2")
    if o["bootstrap"] < 0 or o["bootstrap"] == 1:
        raise UsageError("--bootstrap must be 0 (off) or at least 2")
    if not 0 < o["level"] < 1:
        raise UsageError("--level must lie in (0, 1)")
    if o["workers"] < 1:
        raise UsageError("--workers must be positive")
    try:
        spec = EstimandSpec.parse(o["estimand"], o["ego"])
        ncfg = NuisanceConfig(learner=o["learner"], trim_eps=o["trim_eps"],
                              newton_tol=o["newton_tol"], newton_max_iter=o["newton_max_iter"],
                              lasso_lambda=o["lasso_lambda"], lasso_folds=o["lasso_folds"],
                              lasso_degree=o["lasso_degree"], a1_a2_choice=o["a1_a2"])
        cfg = EstimatorConfig(ncfg, BasisSpec(degree=o["basis_degree"],
                                              standardize=bool(o["standardize"])), o["ite_mode"])
    except (ValueError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from None
    if o["nuisance_file"] and (spec.target is Target.ITE or o["method"] == "sieve"):
        raise UsageError("--nuisance-file applies to direct and spillover effects with "
                         "wald/ipw/g/reg/mr")
    if o["nuisance_file"] and o["bootstrap"]:
        raise UsageError("precomputed nuisances cannot be refitted on bootstrap resamples")
    return spec, cfg


def cmd_estimate(o) -> dict:
    spec, cfg = _estimate_settings(o)
    ds = load_csv(o["data"])
    nuis = None
    if o["nuisance_file"]:
        dd = to_direct_form(ds, spec)
        nuis = load_nuisance_csv(o["nuisance_file"], n=dd.n)
    report = estimate(ds, spec, o["method"], cfg, nuis=nuis)
    doc = report.to_dict()
    if report.eif_values.size:
        lo, hi = plugin_ci(report, o["level"])
        doc["ci"] = {"kind": "plugin", "level": o["level"], "lower": lo, "upper": hi}
    if o["bootstrap"]:
        boot = bootstrap(ds, spec, o["method"], cfg, o["bootstrap"], o["seed"], o["workers"],
                         level=o["level"])
        doc["bootstrap"] = boot.to_dict()
        if doc["ci"] is None:
            doc["ci"] = {"kind": "bootstrap", "level": o["level"], "lower": boot.ci_lower,
                         "upper": boot.ci_upper}
    doc["seed"] = o["seed"]
    if o["out"]:
        Path(o["out"]).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return doc


def cmd_mc_table(o) -> dict:
    if o["reps"] < 2:
        raise UsageError("--reps must be at least 2")
    if any(n < 100 for n in o["ns"]) or not o["ns"]:
        raise UsageError("--ns values must be at least 100")
    bad = [m for m in o["methods"] if m not in MC_METHODS]
    if bad or not o["methods"]:
        raise UsageError(f"--methods must be chosen from {', '.join(MC_METHODS)}")
    bad = [e for e in o["estimands"] if e not in TRUTH]
    if bad:
        raise UsageError(f"unknown estimands: {', '.join(bad)}")
    if o["ci"] not in CI_KINDS:
        raise UsageError(f"--ci must be one of {', '.join(CI_KINDS)}")
    if o["pattern"] not in PATTERNS:
        raise UsageError(f"--pattern must be one of {', '.join(PATTERNS)}")
    if o["ci"] == "bootstrap" and o["bootstrap"] < 2:
        raise UsageError("--bootstrap must be at least 2 with --ci bootstrap")
    if o["workers"] < 1:
        raise UsageError("--workers must be positive")
    try:
        basis = BasisSpec(degree=o["basis_degree"])
        nuis = NuisanceConfig(trim_eps=o["trim_eps"])
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    low_rep = o["reps"] < 20
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            table = run_mc(o["reps"], o["ns"], o["methods"], o["seed"], workers=o["workers"],
                           estimands=tuple(o["estimands"]), B=o["bootstrap"], ci=o["ci"],
                           pattern=o["pattern"], basis=basis, nuisance=nuis)
        except ConfigurationError as exc:
            raise UsageError(str(exc)) from None
    if low_rep:
        print(f"low-rep warning: {o['reps']} replications give noisy bias/SD/CP", file=sys.stderr)
    for line in table.summary_lines():
        print(line, file=sys.stderr)
    if o["out_csv"]:
        table.to_csv(o["out_csv"])
    if o["out_text"]:
        Path(o["out_text"]).write_text(table.to_text() + "\n", encoding="utf-8")
    return {
        "command": "mc-table",
        "seed": o["seed"],
        "reps": o["reps"],
        "low_rep_warning": low_rep,
        "rows": [{"estimand": r.estimand, "method": r.method, "n": r.n, "bias": _num(r.bias),
                  "sd": _num(r.sd), "cp": _num(r.cp), "failures": r.failures} for r in table.rows],
    }


def _num(v):
    return None if v != v else v


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "mc-table": cmd_mc_table}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve(args)
        doc = COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PeerIVError as exc:
        print(f"estimation aborted ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_ABORT
    json.dump(doc, sys.stdout, indent=2, allow_nan=False)
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
