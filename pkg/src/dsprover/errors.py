"""Exception types shared across modules."""


class DSProverError(Exception):
    """Base class for all package errors."""


class EndpointUnavailable(DSProverError):
    """A model endpoint could not be reached after retries."""


class ReplayMiss(EndpointUnavailable):
    """Replay mode was asked for a request that was never recorded."""


class ProtocolError(DSProverError):
    """A peer (model endpoint or checker process) sent something malformed."""


class VerifierUnavailable(DSProverError):
    """The proof checker could not be started or died irrecoverably."""


class SketchFailed(DSProverError):
    """The sketch could not be repaired into a checkable state."""

    def __init__(self, message: str, sketch: object = None) -> None:
        super().__init__(message)
        self.sketch = sketch


class ConfigError(DSProverError):
    """Run configuration is missing or inconsistent."""


class BenchmarkError(DSProverError):
    """A benchmark file is malformed."""


class StoreError(DSProverError):
    """The attempt store could not be read or written."""
