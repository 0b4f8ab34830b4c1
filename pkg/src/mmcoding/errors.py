"""Exception and warning classes shared across the package."""


class MMCodingError(Exception):
    """Base class for all package errors."""


class ParseError(MMCodingError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(MMCodingError):
    pass


class DataIOError(MMCodingError, OSError):
    pass


class ArgumentError(MMCodingError, ValueError):
    pass


class DimensionError(MMCodingError, ValueError):
    pass


class SingularError(MMCodingError, ArithmeticError):
    pass


class NonPsdError(MMCodingError, ValueError):
    pass


class EigenFailure(MMCodingError, ArithmeticError):
    pass


class SizeError(MMCodingError, ValueError):
    pass


class InsufficientDataError(MMCodingError, ValueError):
    pass


class ModelIOError(MMCodingError, OSError):
    pass


class VersionError(MMCodingError):
    pass


class ConvergenceWarning(UserWarning):
    pass


class RankWarning(UserWarning):
    pass
