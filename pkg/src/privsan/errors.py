"""Exception taxonomy shared across the package."""


class ConfigurationError(ValueError):
    """Invalid spec/config values (bad alpha list, prior mismatch, missing pieces)."""


class DomainError(ValueError):
    """Arguments outside an operation's domain (shape mismatch, label out of range)."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss). Carries the log collected so far."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class FormatError(ValueError):
    """A serialized artifact failed validation; message names the offending field."""


class TransportError(RuntimeError):
    """Client-side transport failure. Carries results collected before the failure."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial if partial is not None else []
