"""Exception hierarchy.

Every error carries a ``category`` string (machine readable, printed by the
CLI) and maps onto one of the CLI exit codes.
"""


class MSMError(Exception):
    category = "error"
    exit_code = 1


class ValidationError(MSMError):
    category = "validation"
    exit_code = 2


class ConfigurationError(ValidationError):
    category = "configuration"


class InsufficientSupportError(ValidationError):
    category = "insufficient-support"


class MissingCovariateError(ValidationError):
    category = "missing-covariate"


class NoExposureError(ValidationError):
    category = "no-exposure"


class ConvergenceError(MSMError):
    category = "non-convergence"
    exit_code = 3


class NumericError(MSMError):
    category = "numeric"
    exit_code = 4


class IntensityOverflowError(NumericError):
    category = "intensity-overflow"

    def __init__(self, message, transition=None):
        super().__init__(message)
        self.transition = transition


class NearDefectiveError(NumericError):
    category = "near-defective"


class ComplexResidualError(NumericError):
    category = "complex-residual"


class DegenerateContributionError(NumericError):
    category = "degenerate-contribution"

    def __init__(self, message, subject=None, interval=None):
        super().__init__(message)
        self.subject = subject
        self.interval = interval


class NonIdentifiableError(NumericError):
    category = "non-identifiable"
