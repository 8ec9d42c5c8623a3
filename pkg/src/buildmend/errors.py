"""Exception hierarchy.

Every error raised on purpose by the pipeline derives from
:class:`BuildMendError`; the CLI maps those to exit status 1.
"""


class BuildMendError(Exception):
    """Base class for domain errors."""


class PreconditionError(BuildMendError, ValueError):
    """An operation was called outside its contract."""


class ConfigError(BuildMendError):
    pass


class DependencyError(BuildMendError):
    """A pipeline stage ran before the artifact it consumes existed."""

    def __init__(self, missing, hint: str = ""):
        super().__init__(f"missing upstream artifact: {missing}" + (f" ({hint})" if hint else ""))
        self.missing = missing


# forge access

class CredentialError(BuildMendError):
    pass


class RetryAfterError(BuildMendError):
    def __init__(self, wait_seconds, message="rate limit exhausted"):
        super().__init__(f"{message}; retry after {wait_seconds:.0f}s")
        self.wait_seconds = wait_seconds


class TransportError(BuildMendError):
    pass


class SchemaError(BuildMendError):
    def __init__(self, field, message="malformed API payload"):
        super().__init__(f"{message}: field {field!r}")
        self.field = field


class LogUnavailableError(BuildMendError):
    pass


# git history

class UnresolvableIntegrationError(BuildMendError):
    pass


class TopologyMismatchError(BuildMendError):
    pass


class NotFoundError(BuildMendError):
    pass


class ProvisioningError(BuildMendError):
    def __init__(self, message, submodule=None):
        super().__init__(message)
        self.submodule = submodule


class DiffParseError(BuildMendError):
    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class EmptyDiffError(BuildMendError):
    pass


# CI configuration

class NoCIError(BuildMendError):
    pass


class CIParseError(BuildMendError):
    def __init__(self, message, file, line=None):
        where = f"{file}:{line}" if line is not None else str(file)
        super().__init__(f"{where}: {message}")
        self.file = file
        self.line = line


class NoBuildStageError(BuildMendError):
    def __init__(self, markers):
        super().__init__("no job invokes a compiler; markers tried: " + ", ".join(markers))
        self.markers = list(markers)


class MatrixLimitError(BuildMendError):
    pass


class AmbiguousJobError(BuildMendError):
    pass


class NoImageError(BuildMendError):
    pass


# sandbox

class RuntimeUnavailableError(BuildMendError):
    pass


# log parsing and classification

class NoFatalErrorError(BuildMendError):
    """The log has no error-severity diagnostic; the failure was not a compilation failure."""


class UnclassifiedError(BuildMendError):
    def __init__(self, diagnostic):
        super().__init__(f"no classification rule matches: {diagnostic.message!r}")
        self.diagnostic = diagnostic


# fix corpus and prompting

class UnminableError(BuildMendError):
    pass


class StaleDiagnosticError(BuildMendError):
    pass


class NoExamplesError(BuildMendError):
    def __init__(self, strategy):
        super().__init__(f"no eligible fix examples for strategy {strategy}")
        self.strategy = strategy


class UnextractableError(BuildMendError):
    pass


class InconsistencyError(BuildMendError):
    pass


class BudgetTooSmallError(BuildMendError):
    pass


# repair

class DriftError(BuildMendError):
    pass


class MultiFileError(BuildMendError):
    pass


class ProviderError(BuildMendError):
    pass


# statistics

class DegenerateTableError(BuildMendError):
    pass


class InsufficientConditionsError(BuildMendError):
    pass
