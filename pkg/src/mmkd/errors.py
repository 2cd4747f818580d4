"""Exception types shared across the package."""


class MMKDError(Exception):
    """Base class for all errors raised by mmkd."""


class DimensionError(MMKDError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(MMKDError, ValueError):
    """A documented precondition was violated by the caller."""


class StateError(MMKDError, RuntimeError):
    """An object was used in a state that does not allow the operation."""


class ConfigError(MMKDError, ValueError):
    """A configuration value is missing, unknown or out of range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
