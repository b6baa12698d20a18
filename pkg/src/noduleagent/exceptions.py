"""noduleagent/exceptions.py.

Exception classes used throughout the project.

Every class carries an `exit_code`, which the command line surface reports
verbatim: 2 for configuration problems, 3 for backend failures, 4 for bad
data.
"""

from typing import Dict, Optional


class NoduleAgentError(Exception):
    """Root of the project's exception hierarchy."""

    exit_code = 1

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.context = []

    def annotate(self, context: str):
        """Prepends `context` (e.g. "slice 12") to the message and returns
        `self`, so that callers can `raise err.annotate(...)`."""
        self.context.insert(0, context)
        self.args = (f"{context}: {self.args[0]}" if self.args else context,)
        return self


class ConfigError(NoduleAgentError):
    """Signaled when a pipeline configuration is missing, unreadable, or
    references backends that do not exist."""

    exit_code = 2


class BackendError(NoduleAgentError):
    """Signaled when an external model backend fails."""

    exit_code = 3

    def __init__(self, message: str = "", backend_id: Optional[str] = None):
        if backend_id is not None:
            message = f"[{backend_id}] {message}"
        super().__init__(message)
        self.backend_id = backend_id


class BackendTimeout(BackendError):
    """The backend did not answer within its configured timeout."""

    pass


class BackendTransportError(BackendError):
    """The backend could not be reached, or answered with a transport-level
    failure (HTTP status, exhausted fixture script, ...)."""

    pass


class SchemaViolation(BackendError):
    """A request or response does not match the schema of its role."""

    pass


class FanoutError(BackendError):
    """Aggregate failure of a fan-out: maps failed spec indices to the
    individual errors."""

    def __init__(self, failures: Dict[int, BackendError]):
        listing = ", ".join(
            f"{index} ({failure.backend_id})" for index, failure in failures.items()
        )
        super().__init__(f"fan-out failed at indices {listing}")
        self.failures = failures

    @property
    def failed_indices(self):
        return sorted(self.failures.keys())


class DataError(NoduleAgentError):
    """Signaled on malformed or inconsistent input data."""

    exit_code = 4


class EmptyMaskError(DataError):
    """Emitted when constructing a mask with no raised pixels."""

    pass


class DimensionMismatch(DataError):
    """Two images or masks that must share a grid do not."""

    pass


class VolumeFormatError(DataError):
    """The header/payload pair of a volume on disk is missing or
    inconsistent."""

    pass


class DegenerateClusterError(DataError):
    """Averaging a mask cluster left no pixel above the 0.5 threshold.

    Callers are expected to drop the cluster rather than abort.
    """

    pass


class RecordSchemaError(DataError):
    """A memory record payload does not match the schema of its kind."""

    pass


class MemoryStoreError(NoduleAgentError):
    """Emitted when the case memory cannot be read or written."""

    exit_code = 4
