class ConfigError(ValueError):
    """Raised when a run, schedule, or model configuration is invalid."""
