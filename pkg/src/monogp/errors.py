"""Exception hierarchy shared by the library and the command-line tool."""


class MonoGPError(Exception):
    """Base class for all errors raised by monogp."""


class InputShapeError(MonoGPError, ValueError):
    pass


class DomainError(MonoGPError, ValueError):
    pass


class ConditioningError(MonoGPError, ArithmeticError):
    """Cholesky factorization failed even at the largest allowed jitter."""

    def __init__(self, message, jitter):
        super().__init__(f"{message} (final jitter tried: {jitter:.1e})")
        self.jitter = jitter


class InitializationError(MonoGPError):
    pass


class DiagnosticError(MonoGPError, ValueError):
    pass


class ConfigError(MonoGPError, ValueError):
    pass


class DataError(MonoGPError, ValueError):
    pass


class SchemeError(MonoGPError, ValueError):
    pass


class ConvergenceError(MonoGPError):
    pass
