"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operand's dimensions do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared in an intermediate result."""


class GuardError(ValueError):
    """A harness guard was exceeded (e.g. exact attention on a huge N)."""


class MetricUndefinedError(ValueError):
    """A metric is undefined for the given inputs (e.g. HD on an empty mask)."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


class PgmError(ValueError):
    """PGM file is malformed; message carries the byte offset."""


class ConfigError(ValueError):
    """Config text contains an unknown key or an unparsable value."""
