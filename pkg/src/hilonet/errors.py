"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, anything else -> 4.
"""


class ConfigError(ValueError):
    """A configuration or geometry problem (bad flag, indivisible extent)."""


class ShapeError(ValueError):
    """Operand shapes disagree at runtime."""


class DataError(RuntimeError):
    """A problem with input data or stored files."""


class ChecksumError(DataError):
    """Checkpoint bytes fail CRC validation."""


class VersionError(DataError):
    """Checkpoint format version is not supported."""


class ShapeMismatchError(DataError):
    """Stored weights do not fit the target model.

    Carries the list of offending entries so callers can print a diff.
    """

    def __init__(self, message: str, mismatches: list[str] | None = None):
        super().__init__(message)
        self.mismatches = mismatches or []
