"""Exception hierarchy shared by all voxreg modules."""


class VoxregError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(VoxregError):
    """Invalid or inconsistent configuration values."""


class GeometryError(VoxregError):
    """Incompatible grids, shapes, or channel counts."""


class DataError(VoxregError):
    """Array payloads that violate a type invariant (NaN/Inf, bad size)."""


class NumericalAbortError(VoxregError):
    """An iterative solver produced a non-finite value and was stopped."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class FormatError(VoxregError):
    """Base class for file parsing failures."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File declares an unsupported format version."""


class TruncatedPayloadError(FormatError):
    """Payload size does not match what the header declares."""


class NonFiniteDataError(FormatError):
    """Payload contains NaN or Inf values."""


class UnsupportedDatatypeError(FormatError):
    """File uses a datatype outside the supported subset."""
