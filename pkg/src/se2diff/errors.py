"""Typed errors shared across modules (CLI maps these to exit codes)."""


class ConfigError(ValueError):
    """Bad or unknown configuration."""


class DataError(ValueError):
    """Malformed or missing dataset content."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required (e.g. training loss)."""


class CheckpointError(ValueError):
    """Unreadable, corrupted, or incompatible model checkpoint."""


class GenerationError(RuntimeError):
    """Scene generation could not satisfy placement constraints."""
