"""Exception hierarchy shared by every metafit module."""


class MetafitError(Exception):
    """Base class for all errors raised by metafit."""


class UsageError(MetafitError, ValueError):
    """An operation was called in a way its contract does not allow."""


class ShapeError(UsageError):
    """Operand shapes do not conform for the named op."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(MetafitError, ValueError):
    """Input lies outside the real domain of a primitive (log of non-positive...)."""


class NumericError(MetafitError, ArithmeticError):
    """A computation produced a non-finite value or failed a numeric check."""


class ConfigError(MetafitError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(MetafitError, ValueError):
    """Dataset ingestion, validation or episode-protocol failure."""
