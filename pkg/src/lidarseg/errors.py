"""Shared exception types."""


class FormatError(ValueError):
    """A file's bytes do not match the expected on-disk format."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""
