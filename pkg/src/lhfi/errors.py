"""Exception hierarchy shared by every lhfi module."""


class LHFIError(Exception):
    """Base class for all lhfi errors."""


class InvalidArgumentError(LHFIError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(InvalidArgumentError):
    """Input is well-formed but statistically degenerate (zero variance, zero width)."""


class NotApplicableError(LHFIError):
    """The requested update does not apply to the given model specification."""


class SamplerStateError(LHFIError):
    """The Markov chain reached a state with zero posterior support."""


class InitializationError(SamplerStateError):
    """The starting state of a chain has non-finite log posterior."""


class ValidationError(LHFIError):
    """Input file content violates a data invariant.

    ``location`` names the offending file/row/column so messages are actionable.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


class DuplicateKeyError(ValidationError):
    pass


class MissingColumnError(ValidationError):
    pass


class ParseError(ValidationError):
    pass
