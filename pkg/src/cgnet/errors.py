"""Exception types raised across the package."""


class CGNetError(Exception):
    """Base class for expected, user-facing failures."""


class ShapeError(CGNetError, ValueError):
    pass


class ConfigError(CGNetError, ValueError):
    pass


class FormatError(CGNetError, ValueError):
    """Malformed or unsupported file contents."""


class CheckpointError(FormatError):
    pass


class NonFiniteError(CGNetError, FloatingPointError):
    pass
