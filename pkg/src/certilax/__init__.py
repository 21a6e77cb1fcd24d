"""Robustness certificates for ReLU networks from low-rank SDP relaxations."""

from .attack import AttackSpec, PgdConfig, feasible_project, pgd_upper_bound
from .exceptions import (
    CertilaxError,
    ConfigurationError,
    InvalidInputError,
    NumericalFailure,
    PreconditionError,
    SizeError,
)
from .model import (
    MarginObjective,
    MlpNetwork,
    PreactivationBounds,
    baseline_margin_bound,
    forward,
    interval_bounds,
    load_network,
    margin_objective,
    random_network,
    save_network,
)
from .oracle import OracleConfig, exact_margin, grid_margin
from .relaxation import BmPoint, BmProblem, Multipliers, SlackReport, assemble_slack, build, dual_lower_bound
from .solver import KktReport, SolveConfig, solve
from .staircase import (
    CertificateResult,
    ClassCertificate,
    StaircaseConfig,
    certify_class,
    certify_input,
    escape,
)

__version__ = "0.1.0"

__all__ = [
    "AttackSpec",
    "BmPoint",
    "BmProblem",
    "CertificateResult",
    "CertilaxError",
    "ClassCertificate",
    "ConfigurationError",
    "InvalidInputError",
    "KktReport",
    "MarginObjective",
    "MlpNetwork",
    "Multipliers",
    "NumericalFailure",
    "OracleConfig",
    "PgdConfig",
    "PreactivationBounds",
    "PreconditionError",
    "SizeError",
    "SlackReport",
    "SolveConfig",
    "StaircaseConfig",
    "assemble_slack",
    "baseline_margin_bound",
    "build",
    "certify_class",
    "certify_input",
    "dual_lower_bound",
    "escape",
    "exact_margin",
    "feasible_project",
    "forward",
    "grid_margin",
    "interval_bounds",
    "load_network",
    "margin_objective",
    "pgd_upper_bound",
    "random_network",
    "save_network",
    "solve",
]
