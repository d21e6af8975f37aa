"""Exception types shared across the package.

The CLI maps :class:`ValidationError` subclasses to exit code 2 and
:class:`NumericalError` subclasses to exit code 3.
"""


class ValidationError(ValueError):
    pass


class DomainError(ValidationError):
    """An input lies outside the domain of an operation."""


class DimensionError(ValidationError):
    """Array shapes of cooperating objects disagree."""


class NumericalError(ArithmeticError):
    pass


class TruncationError(NumericalError):
    """The positive orthant carries (numerically) no mass of a Gaussian."""


class DivergenceError(NumericalError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state
