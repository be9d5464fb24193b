"""Exception types shared across the package, mapped to CLI exit codes."""


class EuphdetError(Exception):
    """Base class for package errors."""


class InputError(EuphdetError):
    """Missing or malformed input (file, term, argument). CLI exit 2."""


class InvariantError(EuphdetError):
    """A documented invariant or precondition was violated. CLI exit 3."""


class CheckpointError(InvariantError):
    """Checkpoint file is corrupted, truncated, or from another config."""


class TrainingDiverged(InvariantError):
    """Loss became non-finite during training.

    Carries the last checkpoint that was still healthy, if any.
    """

    def __init__(self, msg: str, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


class ProviderError(EuphdetError):
    """A text-generation provider failed after retries. CLI exit 4."""

    def __init__(self, msg: str, attempts: int = 0):
        super().__init__(msg)
        self.attempts = attempts
