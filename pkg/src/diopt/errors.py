class DioptError(Exception):
    """Base class for all package errors."""


class ShapeError(DioptError, ValueError):
    pass


class DomainError(DioptError, ValueError):
    pass


class ConfigError(DioptError, ValueError):
    pass


class TrainingError(DioptError, RuntimeError):
    pass


class SamplingError(DioptError, RuntimeError):
    pass


class GenerationError(DioptError, RuntimeError):
    pass


class CompletionError(DioptError, RuntimeError):
    pass


class SolverError(DioptError, RuntimeError):
    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


class OracleError(DioptError, RuntimeError):
    pass


class ParseError(DioptError, ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(DioptError, ValueError):
    pass


class ChecksumError(DioptError, ValueError):
    """Config hash stored in an artifact does not match the one supplied."""
