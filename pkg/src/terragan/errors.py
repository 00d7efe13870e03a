"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid run, schedule, or model configuration."""


class ParseError(ValueError):
    """A file could not be parsed; message carries line context."""


class EmptyDataError(ValueError):
    """No usable cells: all inputs are nodata or empty."""


class CorruptionError(RuntimeError):
    """Stored data does not match its recorded digest or framing."""


class FetchError(RuntimeError):
    """An imagery client failed to deliver a tile."""


class MissingFixtureError(FetchError):
    """The file-backed imagery client has no fixture for a footprint."""
