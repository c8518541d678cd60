"""Exception hierarchy shared by every cdslice module."""


class CdSliceError(Exception):
    """Base class for all errors raised by cdslice."""


class DimensionError(CdSliceError, ValueError):
    pass


class ParameterError(CdSliceError, ValueError):
    pass


class NumericError(CdSliceError, ArithmeticError):
    pass


class InputError(CdSliceError, ValueError):
    pass


class GeometryError(CdSliceError, ValueError):
    pass


class CapacityError(CdSliceError, ValueError):
    """A slice holds more points than the padded capacity allows."""

    def __init__(self, bin_index: int, count: int, capacity: int, source_id: str = ""):
        self.bin_index = bin_index
        self.count = count
        self.capacity = capacity
        self.source_id = source_id
        where = f" in {source_id!r}" if source_id else ""
        super().__init__(
            f"slice {bin_index}{where} holds {count} points, capacity is {capacity}"
        )


class FormatError(CdSliceError, ValueError):
    """Binary file could not be decoded. ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigMismatchError(CdSliceError, ValueError):
    pass


class ManifestError(CdSliceError, ValueError):
    """Problem in a manifest file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
