"""Exception types shared across the package."""


class UnderspecError(Exception):
    """Base class for all package errors."""


class ShapeError(UnderspecError, ValueError):
    """Array shapes disagree with a model spec or with each other."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class ConfigError(UnderspecError, ValueError):
    """A configuration field holds an invalid value."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericalError(UnderspecError, ArithmeticError):
    """A loss or gradient became non-finite.

    ``term`` names the loss component that diverged (``pred``, ``indep``,
    ``manifold``, ``baseline``, ``grad`` ...).
    """

    def __init__(self, term, message="", breakdown=None):
        super().__init__(f"non-finite value in {term} term" + (f": {message}" if message else ""))
        self.term = term
        self.breakdown = breakdown


class FileFormatError(UnderspecError, IOError):
    """Base class for binary file format problems."""


class BadMagic(FileFormatError):
    pass


class TruncatedFile(FileFormatError):
    pass


class DimensionMismatch(FileFormatError):
    pass
