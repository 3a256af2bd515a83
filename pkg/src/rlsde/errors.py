"""Exception hierarchy shared across the package."""


class RlsdeError(Exception):
    """Base class for all package errors."""


class NotPsdError(RlsdeError, ValueError):
    """Matrix is not symmetric positive semi-definite within tolerance."""


class NotHurwitzError(RlsdeError, ValueError):
    """Matrix has an eigenvalue outside the open left half-plane."""


class NotStableError(RlsdeError, ValueError):
    """Limit drift matrix has a nonnegative logarithmic norm."""


class DecayViolatedError(RlsdeError, ValueError):
    """Tabulated flow violates its declared exponential decay bound."""


class GridExceededError(RlsdeError, ValueError):
    """Requested time lies beyond the realized coefficient grid."""


class IntervalMismatchError(RlsdeError, ValueError):
    """Propagators do not share an endpoint."""


class RegimeTooWideError(RlsdeError, ValueError):
    """Peano-Baker series requested outside its convergence-friendly regime."""


class FitDegenerateError(RlsdeError, ValueError):
    """Not enough moment orders to fit the growth constants."""


class StepTooLargeError(RlsdeError, ValueError):
    """Time step is too large for the drift magnitude."""


class GateUnsatisfiedError(RlsdeError, ValueError):
    """Preconditions on (t, epsilon) of a certificate are not met."""


class EmptyWindowError(RlsdeError, ValueError):
    """The certified time window is empty for the given fluctuation level."""


class EpsilonOneError(RlsdeError, ValueError):
    """Window length is undefined at epsilon = 1."""


class ConfigError(RlsdeError, ValueError):
    """Run configuration failed schema validation."""
