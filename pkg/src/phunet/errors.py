"""Exception types shared across the package."""


class PhunetError(Exception):
    """Base class for all package errors."""


class DimensionError(PhunetError, ValueError):
    """An array has the wrong shape, or a size is not a power of two."""


class ContractError(PhunetError, ValueError):
    """A precondition on argument values was violated."""


class UndefinedMetricError(PhunetError, ValueError):
    """A metric is undefined for the given input (e.g. zero mean)."""


class NumericError(PhunetError, ArithmeticError):
    """A non-finite value appeared during training."""


class CheckpointError(PhunetError, OSError):
    """A parameter checkpoint is missing, truncated or corrupt."""


class VolumeFormatError(PhunetError, ValueError):
    """Base class for volume parse errors.

    ``offset`` is the byte offset of the offending field and ``field`` its
    name, so messages point at the exact location in the file.
    """

    def __init__(self, message, offset=None, field=None):
        self.offset = offset
        self.field = field
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class BadMagicError(VolumeFormatError):
    pass


class UnsupportedDatatypeError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass
