class CertilaxError(Exception):
    """Base class for all errors raised by certilax."""


class InvalidInputError(CertilaxError, ValueError):
    """Malformed network, input vector or attack specification."""


class ConfigurationError(CertilaxError, ValueError):
    """Inconsistent solver or relaxation configuration."""


class PreconditionError(CertilaxError, ValueError):
    """An operation was called with arguments violating its contract."""


class NumericalFailure(CertilaxError, ArithmeticError):
    """The solver produced non-finite values."""


class SizeError(CertilaxError, ValueError):
    """Problem too large for an exhaustive method."""
