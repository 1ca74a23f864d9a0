"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class LatentCnnError(Exception):
    exit_code = 1


class ConfigError(LatentCnnError, ValueError):
    """Inconsistent shapes, bad config keys or values."""

    exit_code = 2


class UsageError(LatentCnnError, ValueError):
    """An operation was called outside its preconditions."""

    exit_code = 2


class DataError(LatentCnnError):
    exit_code = 3


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class NumericError(LatentCnnError, ArithmeticError):
    """A non-finite value appeared during an update.

    Carries whatever context is known at the raise site (layer index,
    update counter, selected region).
    """

    exit_code = 4

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class VersionError(LatentCnnError):
    """Model file has the wrong magic or an unsupported version."""

    exit_code = 5
