"""Exception hierarchy shared by all nslnet modules."""


class NslError(Exception):
    """Base class for every error raised by nslnet."""


class SizeError(NslError, ValueError):
    pass


class ShapeError(NslError, ValueError):
    pass


class DataError(NslError, ValueError):
    pass


class ParameterError(NslError, ValueError):
    pass


class FormatError(NslError, ValueError):
    """A file does not follow the expected binary or text layout."""


class DegeneratePixelError(NslError, ValueError):
    """A quantity is undefined because a centered feature norm is below epsilon."""
