"""Exception hierarchy shared across the package."""


class NoctlError(Exception):
    """Base class for all package-specific failures."""


class EvaluationError(NoctlError):
    """Numeric failure while evaluating a recorded computation."""

    def __init__(self, message, node=None, op=None):
        if node is not None:
            message = f"{message} (node {node}, op '{op}')"
        super().__init__(message)
        self.node = node
        self.op = op


class DomainError(EvaluationError):
    """An operation left its domain: log of a non-positive value, division by zero."""


class NonFiniteError(EvaluationError):
    """A NaN or Inf appeared mid-evaluation."""


class NumericalError(NoctlError):
    """A solver failed numerically (divergence, factorization failure, ...)."""


class LineSearchError(NumericalError):
    """Backtracking line search exhausted its trial budget without sufficient decrease."""


class TrainingDivergedError(NumericalError):
    """Training hit a non-finite loss; carries the last finite state."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


class CheckpointError(NoctlError):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    """Bad magic bytes or unsupported format version."""


class CheckpointShapeError(CheckpointError):
    """Header and payload disagree about parameter shapes or counts."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload was read."""


class ConfigError(NoctlError):
    """Invalid experiment configuration; message names the offending field."""
