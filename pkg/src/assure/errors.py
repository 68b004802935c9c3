"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class AssureError(ValueError):
    code = "assure"


class DomainError(AssureError):
    """An argument lies outside the mathematical domain of an operation."""

    code = "domain"


class PreconditionError(AssureError):
    """A documented precondition of an operation is violated."""

    code = "precondition"


class UnsupportedOperationError(AssureError):
    code = "unsupported"


class DatasetError(AssureError):
    """Malformed input file. ``line`` is the 1-based line number in the file, if known."""

    code = "dataset"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingColumnError(DatasetError):
    code = "missing-column"


class NonNumericError(DatasetError):
    code = "non-numeric"


class InvalidSigmaError(DatasetError):
    code = "invalid-sigma"


class TooFewUnitsError(DatasetError):
    code = "too-few-units"


class ConfigError(AssureError):
    code = "config"
