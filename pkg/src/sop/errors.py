"""Exception hierarchy.

Everything raised deliberately by the package derives from :class:`SOPError`,
so callers (the CLI in particular) can separate model/input problems from
programming errors.
"""


class SOPError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SOPError, ValueError):
    """An argument violates a documented precondition."""


class OutOfDomainError(SOPError, ValueError):
    """Evaluation point outside the knot domain (no extrapolation)."""


class SingularPrecisionError(SOPError, ValueError):
    """Assembled precision matrix is numerically singular."""


class DegenerateMeanError(SOPError, ValueError):
    """Mean on the boundary of the family's valid range."""


class SingularSystemError(SOPError, ValueError):
    """Henderson system or marginal covariance failed to factorize."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class DegenerateComponentError(SOPError, ValueError):
    """An effective dimension collapsed to zero (rank condition (i) failed)."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class OverparameterizedError(SOPError, ValueError):
    """Residual degrees of freedom are not positive."""


class ParseError(SOPError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnbalancedPanelError(ParseError):
    """Hierarchical data whose subjects do not share a common time grid."""
