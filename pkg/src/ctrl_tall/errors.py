"""Exception hierarchy shared across the package."""


class CtrlError(Exception):
    """Base class for all errors raised by ctrl_tall."""


class DimensionError(CtrlError, ValueError):
    """Tensor or feature widths do not agree."""


class DataError(CtrlError):
    """Malformed or inconsistent input data."""


class NumericalError(CtrlError):
    """A loss or gradient became non-finite, or a check found non-determinism."""


class ConfigError(CtrlError, ValueError):
    """Unknown or invalid configuration key/value."""
