"""Exception types shared across the package."""


class InputError(ValueError):
    """Bad argument value (out-of-range label, negative rate, ...)."""


class DimensionError(InputError):
    """Tensor or batch shapes do not line up."""


class ContractError(RuntimeError):
    """A caller broke a module contract (e.g. quantizing an updated layer)."""


class ConfigurationError(RuntimeError):
    """A run cannot be set up with the given configuration."""
