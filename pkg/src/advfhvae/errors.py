"""Exception classes shared across the toolkit."""


class ConfigurationError(ValueError):
    """A config value or combination of values is unusable."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its contract."""


class DataError(ValueError):
    """Corrupt or inconsistent on-disk data (manifests, features, checkpoints)."""
