"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A value is outside the domain an operation accepts."""


class NumericError(ArithmeticError):
    """A computation produced or would produce non-finite values."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or unusable."""


class GenerationError(RuntimeError):
    """Episode or dataset generation could not satisfy its constraints."""


class FormatError(ValueError):
    """On-disk data does not match the documented format."""


class CorruptionError(RuntimeError):
    """On-disk data exists but fails integrity checks."""
