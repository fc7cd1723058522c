"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
anything else -> 3.
"""


class WidirError(Exception):
    """Base class for package errors."""


class ConfigError(WidirError):
    """Invalid configuration: unknown keys, bad values, oversubscribed sizes."""


class DataError(WidirError):
    """Invalid or missing data artifacts: schema mismatches, broken references."""


class StoreError(DataError):
    """Feature-store or payload-store I/O failure; message carries path context."""


class DimensionError(ValueError):
    """Feature/parameter dimension mismatch; message names the component."""


class ModelFormatError(DataError):
    """Corrupt or truncated model stream."""


class ModelVersionError(DataError):
    """Model stream written by an unsupported schema version."""


class ParamCountError(DataError):
    """Deserialized parameter tally violates the architecture's count contract."""
