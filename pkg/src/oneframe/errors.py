"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has the wrong rank, dtype, or dimensions."""


class GeometryError(ValueError):
    """A convolution/pooling geometry produces a non-positive output extent."""


class ModelConfigError(ValueError):
    """A model description is internally inconsistent."""


class TrainingError(RuntimeError):
    """Training produced an invalid state (non-finite parameters)."""


class FormatError(ValueError):
    """A binary file does not conform to its format.

    ``byte_offset`` locates the first offending byte when known.
    """

    def __init__(self, message, byte_offset=None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class UndefinedRateError(ValueError):
    """A fooling rate was requested over zero correctly-classified clips."""


class ConsistencyError(RuntimeError):
    """Internal invariant violated (e.g. pooling indices out of range)."""
