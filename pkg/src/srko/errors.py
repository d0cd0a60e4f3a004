"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class UnderConstrainedError(DomainError):
    """Too few residuals to determine the parameters."""


class GridLookupError(LookupError):
    """A kernel parameter is not a node of the partition table grid."""


class QuadratureError(ArithmeticError):
    """Numerical integration did not reach the requested tolerance."""

    def __init__(self, message, alpha=None, c=None, tau=None, estimate=None, error=None):
        super().__init__(message)
        self.alpha = alpha
        self.c = c
        self.tau = tau
        self.estimate = estimate
        self.error = error


class SolverError(ArithmeticError):
    """The least-squares solver could not produce a valid step."""


class ConfigError(ValueError):
    """A configuration file or flag could not be parsed or validated."""
