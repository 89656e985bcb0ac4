"""Exception hierarchy shared by all modules."""


class CbiLabError(Exception):
    """Base class for every error raised by the package."""


class MeasureError(CbiLabError, ValueError):
    """Unsupported measure variant, bad integrand pairing or zero-mass sampling."""


class ConditionError(CbiLabError):
    """A model precondition (named by ``condition``) does not hold."""

    def __init__(self, condition, message):
        super().__init__(f"{condition}: {message}")
        self.condition = condition


class FlowError(CbiLabError):
    """The flow ODE could not be integrated."""

    def __init__(self, message, time=None):
        if time is not None:
            message = f"{message} (at t={time!r})"
        super().__init__(message)
        self.time = time


class ConfigError(CbiLabError, ValueError):
    """Malformed configuration document."""

    def __init__(self, message, field=None, line=None):
        where = ""
        if field is not None:
            where += f"{field}: "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + message)
        self.field = field
        self.line = line


class SampleError(CbiLabError, ValueError):
    """Empty or otherwise unusable sample input."""
