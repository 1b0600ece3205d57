"""Exception hierarchy shared by every subsystem.

The CLI maps each family onto its own exit code, so callers should raise the
most specific class that applies.
"""


class GroundingError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(GroundingError, ValueError):
    exit_code = 2


class DataError(GroundingError, ValueError):
    exit_code = 3


class NumericError(GroundingError, FloatingPointError):
    exit_code = 4


class ShapeError(GroundingError, ValueError):
    """Incompatible tensor extents."""

    exit_code = 2


class CapacityError(DataError):
    """A phrase does not fit in the configured token budget."""


class FormatError(DataError):
    pass


class AnnotationError(DataError):
    pass


class SamplingError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class DanglingReferenceError(DataError):
    """Annotation refers to an id that does not exist."""


class MetadataError(DataError):
    pass


class GenerationError(DataError):
    """Synthetic data constraints cannot be met."""
