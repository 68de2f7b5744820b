"""Exception hierarchy shared by the library and the command line."""


class ARPoisonError(Exception):
    """Base class; ``exit_code`` and ``kind`` drive the CLI error line."""

    exit_code = 1
    kind = "error"


class ValidationError(ARPoisonError, ValueError):
    exit_code = 2
    kind = "validation"


class ZeroSumCoefficients(ValidationError):
    """Raw coefficients sum to (numerically) zero and cannot be normalized."""


class DimensionTooSmall(ValidationError):
    pass


class ZeroPerturbation(ValidationError):
    pass


class ChannelOutOfRange(ValidationError):
    pass


class ChannelMismatch(ValidationError):
    pass


class ClassOutOfRange(ValidationError):
    pass


class NonSquareP(ValidationError):
    pass


class IndivisibleGrid(ValidationError):
    pass


class FormatError(ARPoisonError):
    """A file on disk does not match the expected layout."""

    exit_code = 3
    kind = "io"


class SearchExhausted(ARPoisonError, RuntimeError):
    exit_code = 4
    kind = "search-exhausted"

    def __init__(self, message, accepted=0, attempts=0):
        super().__init__(message)
        self.accepted = accepted
        self.attempts = attempts
