"""Exception types raised across the package."""


class PessilabError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(PessilabError, ValueError):
    pass


class DimensionMismatch(PessilabError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class InvalidConfig(PessilabError, ValueError):
    pass


class EmptySplit(PessilabError, ValueError):
    pass


class IndexOutOfRange(PessilabError, IndexError):
    pass


class DidNotConverge(PessilabError, RuntimeError):
    """Raised by ``fit_bt(strict=True)``; otherwise the diagnostics carry the flag."""


class DegenerateInput(PessilabError, ValueError):
    pass


class EmptyBatch(PessilabError, ValueError):
    pass


class MissingInput(PessilabError, ValueError):
    pass


class NonFiniteEncountered(PessilabError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SeedMismatch(PessilabError, ValueError):
    pass


class NoStableB(UserWarning):
    """No grid value met the late-phase uncertainty stability threshold."""
