"""Exception hierarchy shared by every module."""


class FusionError(Exception):
    """Base class for all engine errors."""


class ValidationError(FusionError, ValueError):
    """An argument or configuration value is outside its allowed range."""


class StructuralError(FusionError):
    """A model graph or tensor does not have the expected structure."""


class ShapeError(StructuralError, ValueError):
    """Tensor shape does not match what a node declared."""


class NumericError(FusionError, ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""


class StateError(FusionError, RuntimeError):
    """An operation was called in the wrong order."""


class ParseError(FusionError, ValueError):
    """Malformed structure file."""

    def __init__(self, message, record=None, line=None):
        where = []
        if record is not None:
            where.append(f"record {record}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.record = record
        self.line = line


class OutOfBoundsError(FusionError, ValueError):
    """A molecule does not fit inside the raster field of view."""

    def __init__(self, message, extent=None):
        super().__init__(message)
        self.extent = extent


class EncodingRangeError(FusionError, ValueError):
    """An atom property cannot be mapped into the [0, 1] channel range."""


class LoadError(FusionError, ValueError):
    """A descriptor table or archive could not be read."""


class AlignmentError(FusionError, ValueError):
    """Sample ids of two modalities do not line up."""


class UndefinedMetricError(FusionError, ZeroDivisionError):
    """A metric denominator is zero because a class is absent."""


class ConfigError(FusionError, ValueError):
    """A run configuration failed validation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
