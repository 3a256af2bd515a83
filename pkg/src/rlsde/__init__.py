"""Random linear SDEs: drift flows, propagators, simulation and stability certificates."""

__version__ = "0.1.0"

from .coefficients import (
    CoefficientProcessSpec,
    DiffusionModel,
    HypothesisEstimates,
    PerturbationModel,
    sample_coefficient_path,
    sample_coefficients,
)
from .errors import (
    RlsdeError,
    NotPsdError,
    NotHurwitzError,
    NotStableError,
    DecayViolatedError,
    GridExceededError,
    IntervalMismatchError,
    RegimeTooWideError,
    FitDegenerateError,
    StepTooLargeError,
    GateUnsatisfiedError,
    EmptyWindowError,
    EpsilonOneError,
    ConfigError,
)
from .flows import H0Flow, TabulatedFlow, eval_flow
from .linalg import log_norm, matrix_exp, solve_lyapunov, spectral_norm
from .propagator import Propagator, peano_baker, propagate
from .sde import OUSimConfig, SimulationResult, simulate
from .stability import BoundReport, TheoremWindow, estimate_constants, theorem_window

__all__ = [
    "__version__",
    "RlsdeError",
    "NotPsdError",
    "NotHurwitzError",
    "NotStableError",
    "DecayViolatedError",
    "GridExceededError",
    "IntervalMismatchError",
    "RegimeTooWideError",
    "FitDegenerateError",
    "StepTooLargeError",
    "GateUnsatisfiedError",
    "EmptyWindowError",
    "EpsilonOneError",
    "ConfigError",
    "BoundReport",
    "CoefficientProcessSpec",
    "DiffusionModel",
    "H0Flow",
    "HypothesisEstimates",
    "OUSimConfig",
    "PerturbationModel",
    "Propagator",
    "SimulationResult",
    "TabulatedFlow",
    "TheoremWindow",
    "estimate_constants",
    "eval_flow",
    "matrix_exp",
    "solve_lyapunov",
    "log_norm",
    "peano_baker",
    "propagate",
    "sample_coefficient_path",
    "sample_coefficients",
    "simulate",
    "spectral_norm",
    "theorem_window",
]
