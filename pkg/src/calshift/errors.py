"""Exception types shared across the package."""


class CalshiftError(Exception):
    """Base class for all package errors."""


class InputShapeError(CalshiftError):
    """Input dimension does not match what a model declares."""


class NumericOverflowError(CalshiftError):
    """A forward pass produced a non-finite activation."""


class ConfigurationError(CalshiftError):
    """Invalid configuration, empty split, or malformed option."""


class DivergenceError(CalshiftError):
    """Training loss became non-finite."""


class DegenerateValidationError(CalshiftError):
    """Validation data lacks one of the two classes."""


class DegenerateClassError(CalshiftError):
    """A class-balanced metric was asked for with a class missing."""


class UndefinedMetricError(CalshiftError):
    """Metric has no defined value on the given input."""


class ModeError(CalshiftError):
    """Operation requires a different feature mode (e.g. binary features)."""


class DataFormatError(CalshiftError):
    """A data file is malformed; message names line and field."""


class PipelineError(CalshiftError):
    """An experiment stage failed; message names the stage."""
