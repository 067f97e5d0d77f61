"""Exception hierarchy shared across the package."""


class PsfError(Exception):
    """Base class for all package errors."""


class DimensionError(PsfError, ValueError):
    pass


class ConfigError(PsfError, ValueError):
    pass


class DataError(PsfError, ValueError):
    pass


class CheckpointError(PsfError):
    pass


class NumericCheckError(PsfError):
    pass
