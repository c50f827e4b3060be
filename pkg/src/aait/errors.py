"""Exception hierarchy shared across the package."""


class AAITError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(AAITError):
    """Invalid parameter combination or missing input (CLI exit code 2)."""


class DomainError(ConfigurationError, ValueError):
    """A scalar argument lies outside its admissible range."""


class InvalidOperationError(AAITError, ValueError):
    """Unknown image operation."""


class UnsupportedOperationError(AAITError):
    """Operation exists but does not support the requested feature."""


class InvalidPolicyError(AAITError, ValueError):
    pass


class PolicyParseError(AAITError, ValueError):
    pass


class InvalidBatchError(AAITError, ValueError):
    pass


class NumericError(AAITError, ArithmeticError):
    """Non-finite values encountered (CLI exit code 3)."""


class SearchDivergedError(NumericError):
    """Policy search produced a non-finite objective.

    ``state`` holds a plain-python snapshot of the search at the time of failure.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class TrainingFailure(AAITError):
    """Surrogate training finished below the accuracy floor."""

    def __init__(self, message, accuracy=None, classifier=None):
        super().__init__(message)
        self.accuracy = accuracy
        self.classifier = classifier


class CheckpointError(AAITError):
    pass


class IngestionError(ConfigurationError):
    """Task images referenced by a manifest could not be read."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class ManifestError(ConfigurationError):
    pass
