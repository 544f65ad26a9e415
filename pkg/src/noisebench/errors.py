"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class NoisebenchError(Exception):
    pass


class ConfigError(NoisebenchError):
    """Invalid configuration value or malformed experiment config."""


class DataError(NoisebenchError):
    """Problem with dataset content (manifests, audio files, subsets)."""


class ManifestError(DataError):
    """Malformed or inconsistent manifest file."""


class NumericError(NoisebenchError):
    """Non-finite value encountered during training or optimization."""
