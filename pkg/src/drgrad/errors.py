"""Exception types shared across the package."""


class DrgradError(Exception):
    """Base class for all package errors."""


class ShapeError(DrgradError, ValueError):
    """Array dimensions or parameter layouts do not line up."""


class CacheError(DrgradError):
    """A forward cache is stale or belongs to another network."""


class NumericError(DrgradError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ConfigError(DrgradError, ValueError):
    """Invalid model, dataset or experiment configuration."""


class SchemaError(DrgradError, ValueError):
    """Input file is missing required columns."""


class DegenerateLabelError(DrgradError, ValueError):
    """Raw labels carry no information (all values equal)."""


class UndefinedAUCError(DrgradError, ValueError):
    """AUC requested for labels containing a single class."""
