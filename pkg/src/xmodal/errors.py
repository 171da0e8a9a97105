"""Exception hierarchy shared by every xmodal module."""


class XmodalError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(XmodalError):
    """A file does not follow the expected binary layout."""


class DimensionError(XmodalError, ValueError):
    pass


class DuplicateIdError(XmodalError, ValueError):
    pass


class IoError(XmodalError, OSError):
    pass


class ConfigError(XmodalError, ValueError):
    pass


class DomainError(XmodalError, ValueError):
    """Input lies outside the domain of a transform (e.g. negative activations)."""


class EmptyPoolError(XmodalError, ValueError):
    pass


class InsufficientDataError(XmodalError, ValueError):
    pass


class EmptyVectorError(XmodalError, ValueError):
    pass


class UnknownIdError(XmodalError, LookupError):
    pass
