"""Exception hierarchy shared by every module in the package."""


class MLNTError(Exception):
    """Base class for all package errors."""


class DimensionError(MLNTError, ValueError):
    """Array shapes do not line up."""


class InputError(MLNTError, ValueError):
    """An argument holds an invalid value (range, encoding, ...)."""


class StateError(MLNTError, RuntimeError):
    """An object was used in a state it does not support (stale cache, unfitted model)."""


class NumericError(MLNTError, ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(MLNTError, ValueError):
    """The experiment or training configuration cannot be run as given."""


class FormatError(MLNTError, ValueError):
    """A persisted file is malformed, truncated or of an unknown version."""
