"""Exception hierarchy. CLI exit codes key off these classes."""


class MgaClapError(Exception):
    """Base class for all package errors."""


class DimensionError(MgaClapError, ValueError):
    pass


class NonFiniteError(MgaClapError, FloatingPointError):
    """NaN or Inf reached an op boundary."""


class DegenerateInputError(MgaClapError, ValueError):
    pass


class LengthError(MgaClapError, ValueError):
    pass


class VocabularyError(MgaClapError, ValueError):
    pass


class ParameterError(MgaClapError, ValueError):
    pass


class GenerationError(MgaClapError, RuntimeError):
    pass


class FormatError(MgaClapError, ValueError):
    pass


class ConfigError(MgaClapError, ValueError):
    pass


class WiringError(MgaClapError, KeyError):
    pass


class NumericAbort(MgaClapError, FloatingPointError):
    """Training produced a non-finite loss; ``dump_path`` points at the diagnostics."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
