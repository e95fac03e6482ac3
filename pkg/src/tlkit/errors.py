"""Exception hierarchy shared across the toolkit.

Two broad families matter for the CLI exit-code contract: configuration or
input problems (exit code 2) and estimation failures (exit code 1).
"""


class TlkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigInputError(TlkitError):
    """Problems with configuration files, schemas, or input data (exit code 2)."""


class EstimationError(TlkitError):
    """Failures arising during model fitting or estimation (exit code 1)."""


# -- configuration / input ------------------------------------------------

class SchemaError(ConfigInputError):
    """Column-role mapping is missing a required role or names an absent column."""


class ValidationError(ConfigInputError):
    """Input data violates a declared invariant (carries a row index when known)."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class SpecError(ConfigInputError):
    """Invalid penalty specification (empty or non-descending grid, bad weights)."""


class InputError(ConfigInputError):
    """Non-finite or otherwise unusable numeric input."""


class ConfigError(ConfigInputError):
    """Malformed run configuration."""


class AlignmentError(ConfigInputError):
    """Feature names or subject rows cannot be reconciled between two objects."""


class MalformedCIError(ConfigInputError):
    """A confidence interval with lower bound above its upper bound."""


# -- estimation ------------------------------------------------------------

class EmptyCohortError(EstimationError):
    """No rows remain after filtering."""


class DegenerateFitError(EstimationError):
    """The likelihood has no interior maximum (e.g. single-class response)."""


class DegenerateOutcomeError(EstimationError):
    """Outcome model cannot be fit (e.g. zero events)."""


class FoldError(EstimationError):
    """A cross-validation fold is unusable (e.g. missing a response class)."""

    def __init__(self, message, fold=None):
        super().__init__(message)
        self.fold = fold


class ConvergenceError(EstimationError):
    """An iterative fit failed to converge where convergence is required."""


class UndefinedAUCError(EstimationError):
    """AUC requested for single-class labels."""
