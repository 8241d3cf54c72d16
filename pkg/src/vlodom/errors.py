class InvalidInputError(ValueError):
    """Raised when an operation receives malformed or non-finite input."""


class LoadError(IOError):
    """Raised when a file on disk cannot be decoded."""


class ParseError(ValueError):
    """Raised when a text file (calib, poses, config) is malformed."""
