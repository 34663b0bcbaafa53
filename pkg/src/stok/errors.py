"""Exception hierarchy shared by all stok modules.

The CLI maps each family to a process exit code (see ``stok.cli``).
"""


class StokError(Exception):
    """Base class for all package errors."""


class ConfigError(StokError, ValueError):
    """Invalid configuration or parameter values."""


class DataError(StokError, ValueError):
    """Malformed, inconsistent or out-of-range data."""


class ShapeError(DataError):
    """Array shapes do not match what an operation requires."""


class FormatError(DataError):
    """A binary container could not be parsed.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MissingArtifactError(StokError, FileNotFoundError):
    """A prerequisite artifact (codebook, checkpoint, token file) is absent."""
