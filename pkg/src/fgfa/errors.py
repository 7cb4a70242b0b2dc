"""Exception types shared across the engine."""


class FGFAError(Exception):
    """Base class for engine errors."""


class ConfigError(FGFAError, ValueError):
    """Shapes, channel counts or configuration values that do not fit together."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ContractViolation(FGFAError, RuntimeError):
    """A runtime invariant was broken (e.g. weights that do not sum to one).

    ``tensors`` optionally maps names to the offending arrays so callers can
    dump them for inspection.
    """

    def __init__(self, message, tensors=None):
        super().__init__(message)
        self.tensors = dict(tensors or {})


class TensorFormatError(FGFAError, ValueError):
    """Malformed ``.fgt`` tensor file."""
