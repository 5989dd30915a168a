class OdfitError(Exception):
    """Base class for errors raised by odfit."""


class ShapeMismatchError(OdfitError, ValueError):
    """Grids that must share dimensions do not."""


class DomainError(OdfitError, ValueError):
    """A value lies outside its allowed domain."""


class DegenerateInputError(OdfitError, ValueError):
    """Input carries no usable information (e.g. every pixel masked)."""


class ConvergenceError(OdfitError, RuntimeError):
    """An iterative procedure produced non-finite values."""


class FrameFormatError(OdfitError, ValueError):
    """A frame file could not be decoded."""


class MalformedHeaderError(FrameFormatError):
    pass


class UnsupportedMaxvalError(FrameFormatError):
    pass


class TruncatedPayloadError(FrameFormatError):
    pass


class LibraryError(OdfitError, ValueError):
    """A background library directory is inconsistent."""


class ConfigError(OdfitError, ValueError):
    """A configuration or manifest is invalid."""
