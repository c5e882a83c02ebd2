"""Exception types shared across the package."""


class SDPCError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SDPCError, ValueError):
    """Shapes or parameters are inconsistent with the network definition."""


class NumericalError(SDPCError, ArithmeticError):
    """A computation produced non-finite values or failed to converge.

    Attributes
    ----------
    last_estimate : float or None
        Best value available when the failure occurred (e.g. the last power
        iteration estimate).
    error_estimate : float or None
        Estimated relative error of ``last_estimate``, when known.
    """

    def __init__(self, message, last_estimate=None, error_estimate=None):
        super().__init__(message)
        self.last_estimate = last_estimate
        self.error_estimate = error_estimate


class DataError(SDPCError, IOError):
    """Input data is missing, truncated or unreadable."""


class AnalysisError(SDPCError):
    """Analysis cannot proceed (e.g. too few oriented features)."""
