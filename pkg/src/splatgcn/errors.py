"""Exception types shared across the package."""


class SplatGCNError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SplatGCNError):
    """A file could not be parsed (message names the offending line/field)."""


class DimensionError(SplatGCNError):
    """Shapes or declared sizes disagree (message names both sides)."""


class DataError(SplatGCNError):
    """Values violate a data contract (non-finite, label out of range, ...)."""


class MatrixError(SplatGCNError):
    """A matrix argument violates a structural requirement (e.g. not PSD)."""


class ConfigError(SplatGCNError):
    """A configuration value is out of its legal range."""


class ContractError(SplatGCNError):
    """An operation was called outside its contract (e.g. non-scalar loss)."""
