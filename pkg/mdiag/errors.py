from mdiag.constants import EXIT_BACKEND, EXIT_DATA, EXIT_USAGE


class HarnessError(Exception):
    """Base class for every error the harness raises on purpose."""

    exit_code = EXIT_USAGE


class UsageError(HarnessError):
    exit_code = EXIT_USAGE


class ConfigError(HarnessError):
    exit_code = EXIT_USAGE


class DatasetError(HarnessError):
    exit_code = EXIT_DATA

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field:
            location.append(f"field '{field}'")
        if location:
            message = f"{', '.join(location)}: {message}"
        super().__init__(message)


class DuplicateIdError(DatasetError):
    def __init__(self, kind, duplicate_id, line=None):
        self.duplicate_id = duplicate_id
        super().__init__(f"duplicate {kind} id '{duplicate_id}'", line=line, field="id")


class PreconditionError(HarnessError, ValueError):
    exit_code = EXIT_DATA


class EvaluationError(HarnessError):
    exit_code = EXIT_DATA


class DatasetMismatchError(EvaluationError):
    def __init__(self, first, second):
        self.digests = (first, second)
        super().__init__(
            f"results come from different datasets: {first} vs {second}"
        )


class BackendError(HarnessError):
    exit_code = EXIT_BACKEND


class TransportError(BackendError):
    pass


class EndpointStatusError(BackendError):
    def __init__(self, status, body, retry_after=None):
        self.status = status
        self.body = body
        self.retry_after = retry_after
        super().__init__(f"endpoint returned HTTP {status}: {body[:500]}")


class ScoringUnsupported(BackendError):
    """The endpoint cannot return prompt log-probabilities."""
