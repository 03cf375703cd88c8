class ConfigError(ValueError):
    """Invalid experiment, architecture or attack configuration."""


class InputError(ValueError):
    """Array shapes or values do not match what the operation expects."""


class DataError(RuntimeError):
    """Dataset cannot be generated, read or validated."""
