"""Exception hierarchy shared by every module of the package."""


class ChangepointError(Exception):
    """Base class for all errors raised by adaptcp."""


class DataError(ChangepointError, ValueError):
    """Observations are malformed (NaN, infinite, empty, unparseable)."""


class ModelMismatchError(DataError):
    """Data incompatible with the chosen segment model."""


class ConfigError(ChangepointError, ValueError):
    """Invalid hyperparameters or run configuration."""


class StateError(ChangepointError, ValueError):
    """Invalid changepoint configuration."""


class SegmentIndexError(ChangepointError, IndexError):
    """Segment bounds outside 1..n or reversed."""


class SamplingError(ChangepointError, ValueError):
    """A categorical distribution cannot be built or sampled."""


class EmptySummaryError(ChangepointError, ValueError):
    """A summary was requested before any sample was retained."""


class ShapeError(ChangepointError, ValueError):
    """Arrays that must be aligned have different lengths."""
