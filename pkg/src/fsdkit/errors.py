"""Exception hierarchy shared by every fsdkit module."""


class FsdError(Exception):
    """Base class for all fsdkit errors."""


class InputError(FsdError, ValueError):
    """Bad shapes, bad configuration, unknown kinds, missing files."""


class NumericError(FsdError, ArithmeticError):
    """Non-finite values or failed factorizations."""


class CorruptFileError(InputError):
    """A binary container could not be parsed."""


class VersionError(InputError):
    """A binary container was written by a newer format version."""
