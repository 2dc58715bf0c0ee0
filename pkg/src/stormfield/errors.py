class StormfieldError(Exception):
    """Base class for all errors raised by stormfield."""


class ValidationError(StormfieldError, ValueError):
    """Input violates a documented precondition (CLI exit code 2)."""


class DegenerateInputError(ValidationError):
    """Metric input is numerically degenerate, e.g. a near-zero direction."""


class UnknownStyleError(StormfieldError, KeyError):
    """Adapter style id was never registered."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown style"
