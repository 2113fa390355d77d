"""Exception types raised across the package."""


class CapgraphError(Exception):
    """Base class for all package errors."""


class MissingFile(CapgraphError):
    pass


class MalformedRecord(CapgraphError):
    def __init__(self, path, line_number: int, reason: str):
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"{path}:{line_number}: {reason}")


class DimensionMismatch(CapgraphError):
    pass


class DuplicateVideoId(CapgraphError):
    pass


class IoFailure(CapgraphError):
    pass


class LlmTransport(CapgraphError):
    """Network or protocol failure talking to the chat endpoint (after retries)."""


class UnparseableResponse(CapgraphError):
    """The chat endpoint replied, but not in the expected shape."""


class DegenerateInput(CapgraphError):
    pass


class EmptyPool(CapgraphError):
    pass


class NoGtFrames(CapgraphError):
    pass


class MissingTrace(CapgraphError):
    pass


class StageError(CapgraphError):
    """Wraps the first fatal error of a pipeline stage with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
