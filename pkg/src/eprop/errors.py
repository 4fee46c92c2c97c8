"""Exception hierarchy shared by all modules."""


class EpropError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EpropError, ValueError):
    """Inconsistent shapes, parameters or experiment configuration."""

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class NumericError(EpropError, ArithmeticError):
    """A state variable became non-finite during simulation."""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (at step {step})"
        super().__init__(message)


class UnsupportedModelError(EpropError, TypeError):
    """Operation requested for a model that cannot support it."""


class CurriculumCeilingError(EpropError, ValueError):
    """Curriculum asked for a repetition count that cannot be encoded."""


class UndefinedMetricError(EpropError, ValueError):
    """Metric requested on an empty evaluation mask."""
