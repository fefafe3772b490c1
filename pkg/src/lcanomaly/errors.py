"""Exception types shared across the package."""


class LcAnomalyError(Exception):
    """Base class for all package errors."""


class MalformedInput(LcAnomalyError):
    """Input data violates its format contract (unparseable or inconsistent)."""


class InvalidArgument(LcAnomalyError):
    """A caller-supplied argument violates a precondition."""


class IoError(LcAnomalyError):
    """A referenced file or directory cannot be read or written."""


class NotFound(LcAnomalyError):
    """A requested run, candidate, or resource does not exist."""


class Conflict(LcAnomalyError):
    """The request is valid but clashes with current state (e.g. an
    artifact group below the minimum usable size)."""


class StageError(LcAnomalyError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
