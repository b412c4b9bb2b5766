"""Exception types shared across the package."""


class LangshiftError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(LangshiftError, ValueError):
    pass


class NumericalFailure(LangshiftError, ArithmeticError):
    """An iterative routine did not converge or a factorization broke down."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class NotPositiveDefiniteError(NumericalFailure):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class FormatError(LangshiftError):
    """A container file has the wrong magic, version or header layout."""


class CorruptionError(LangshiftError):
    """A container file ends before a payload block is complete."""

    def __init__(self, message, offset=None, block=None):
        super().__init__(message)
        self.offset = offset
        self.block = block


class UnknownKeyError(LangshiftError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class AreaTooSmallError(LangshiftError, ValueError):
    pass


class ConfigurationError(LangshiftError, ValueError):
    pass


class ComponentIndexError(LangshiftError, IndexError):
    pass
