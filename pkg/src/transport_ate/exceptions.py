"""Exception hierarchy.

Errors are grouped by the CLI exit code they map to: input/schema problems,
numerical failures and pattern mismatches.
"""


class TransportError(Exception):
    """Base class for all package errors."""


class InputError(TransportError, ValueError):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class MalformedRow(InputError):
    pass


class PatternViolation(InputError):
    """A covariate is only partially observed within one stratum."""


class EmptyStratum(InputError):
    pass


class InsufficientRows(InputError):
    pass


class EmptyArm(InputError):
    pass


class EmptySelection(InputError):
    pass


class NumericalError(TransportError, ArithmeticError):
    """A numerical procedure could not produce a result (CLI exit code 3)."""


class SingularDesign(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class NonPositiveVariance(NumericalError, ValueError):
    pass


class ZeroDenominator(NumericalError):
    pass


class BootstrapFailure(NumericalError):
    pass


class PatternMismatch(TransportError):
    """Requested missing-covariate pattern contradicts the data (exit code 4)."""


class MissingBlock(PatternMismatch):
    """A requested moment block involves a covariate that is not observed."""


class MissingShift(PatternMismatch):
    """A covariate shift is neither estimable from the data nor supplied."""


class DegenerateWeights(UserWarning):
    """Sampling weights are extremely concentrated (reported, not fatal)."""
