"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, runtime faults (divergence, contract violations) with 3.
"""


class InvalidInputError(ValueError):
    """Caller passed data that violates an operation's preconditions."""


class InvalidConfigError(ValueError):
    """A configuration object is internally inconsistent or unusable."""


class ContractViolation(RuntimeError):
    """An internal invariant that should be unreachable was violated."""


class ZeroMassConditioningError(ValueError):
    """Conditioning event has zero probability under the joint table."""


class ZeroResidualError(ValueError):
    """Residual of two identical distributions requested.

    Rejection has probability zero when the draft and oracle distributions
    coincide, so asking for the residual indicates a caller bug.
    """


class ImpossibleDraftError(ValueError):
    """A draft token was reported with zero draft density."""


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""
