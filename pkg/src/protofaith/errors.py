"""Exception hierarchy shared by every protofaith module."""


class ProtofaithError(Exception):
    """Base class for all errors raised by the toolkit."""


class ConfigurationError(ProtofaithError, ValueError):
    """A model, layer or rule configuration is inconsistent."""


class ArgumentError(ProtofaithError, ValueError):
    """A caller passed an argument outside the accepted domain."""


class FormatError(ProtofaithError, ValueError):
    """A file on disk does not follow its declared format."""


class DegenerateTargetError(ProtofaithError, ValueError):
    """The explained similarity score is zero, so ratios are undefined."""


class InvariantError(ProtofaithError, RuntimeError):
    """An internal invariant was violated (a bug, not bad input)."""
