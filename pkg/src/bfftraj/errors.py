"""Exception hierarchy shared by every module."""


class BFTError(Exception):
    """Base class for errors raised by this package."""

    category = "config"


class ParameterError(BFTError, ValueError):
    """An argument violates a documented precondition."""

    category = "config"


class NumericError(BFTError, FloatingPointError):
    """A computation produced a non-finite value."""

    category = "numeric"


class GenerationError(BFTError, RuntimeError):
    """Trajectory generation could not find a feasible step."""

    category = "budget"


class SamplingError(BFTError, RuntimeError):
    """Rejection sampling exhausted its budget (degenerate region)."""

    category = "budget"


class TrainingError(NumericError):
    """Training diverged; ``epoch`` holds the failing epoch index."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class FormatError(BFTError, IOError):
    """A file does not carry the expected magic, version or layout."""

    category = "io"
