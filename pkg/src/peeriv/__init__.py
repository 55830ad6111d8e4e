"""Peer-effect estimation from dyadic data with two instruments.

Direct, spillover and interaction effects are estimated with Wald,
inverse-weighting, g-type, regression-type, multiply robust and calibration
(sieve) estimators, with bootstrap and influence-function inference and a
Monte Carlo harness for the reference data-generating process.
"""

from .basis import BasisSpec, build_basis
from .data import (DyadDataset, DyadRow, EstimandSpec, Target, load_csv, signed_indicator_terms,
                   swap_roles, to_direct_form, write_csv)
from .errors import (ConfigurationError, ConvergenceError, DomainError, InferenceError, ParseError,
                     PeerIVError, PreconditionError, SchemaError, SeparationError,
                     SingularSystemError, WeakInstrumentError)
from .estimators import (EstimateReport, EstimatorConfig, estimate, estimate_g, estimate_ipw,
                         estimate_ite, estimate_many, estimate_mr, estimate_reg, estimate_wald)
from .glm import fit_logistic, fit_ols
from .nuisance import NuisanceConfig, NuisanceSet, fit_all, fit_delta, fit_omega
from .inference import BootstrapResult, bootstrap, coverage, plugin_ci
from .sieve import SieveFit, estimate_sieve, solve_H1, solve_H2
from .simulation import (DgpConfig, McTable, corrupted_nuisances, generate, run_mc,
                         true_nuisances, true_values)

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "BootstrapResult", "ConfigurationError", "ConvergenceError", "DgpConfig",
    "DomainError", "DyadDataset", "DyadRow", "EstimandSpec", "EstimateReport", "EstimatorConfig",
    "InferenceError", "McTable", "NuisanceConfig", "NuisanceSet", "ParseError", "PeerIVError",
    "PreconditionError", "SchemaError", "SeparationError", "SieveFit", "SingularSystemError",
    "Target", "WeakInstrumentError", "bootstrap", "build_basis", "corrupted_nuisances",
    "coverage", "estimate", "estimate_g", "estimate_ipw", "estimate_ite", "estimate_many",
    "estimate_mr", "estimate_reg", "estimate_sieve", "estimate_wald", "fit_all", "fit_delta",
    "fit_logistic", "fit_ols", "fit_omega", "generate", "load_csv", "plugin_ci", "run_mc",
    "signed_indicator_terms", "solve_H1", "solve_H2", "swap_roles", "to_direct_form",
    "true_nuisances", "true_values", "write_csv",
]
