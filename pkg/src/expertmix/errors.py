"""Exception types shared across the package."""


class ExpertMixError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(ExpertMixError, ValueError):
    """An argument violates a documented precondition."""


class InvariantError(ExpertMixError):
    """A structural invariant of a value object is broken."""


class UnknownClassError(ExpertMixError, KeyError):
    """A class identifier is not present in the structure being queried."""


class InvalidDatasetError(ExpertMixError):
    """A dataset cannot support the requested operation."""


class InvalidLabelError(InvalidArgumentError):
    """A training label falls outside the expected slot range."""


class ParseError(ExpertMixError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingFailureError(ExpertMixError):
    """Training produced a non-finite objective; carries the epoch index."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class PipelineStageError(ExpertMixError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
