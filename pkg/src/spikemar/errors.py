class ConfigError(ValueError):
    """Invalid user configuration (bad key, value or combination)."""


class DataError(ValueError):
    """Corpus cannot be read or cannot feed training."""
