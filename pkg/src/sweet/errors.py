"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Arrays whose dimensions disagree."""


class ParameterError(ValueError):
    """A scalar or table argument outside its admissible range."""


class PreconditionError(ValueError):
    """An input that violates an operation's documented precondition."""


class DegenerateDataError(RuntimeError):
    """No candidate model explains the observed data."""


class NumericError(ArithmeticError):
    """Ill-conditioned linear algebra."""


class GenerationError(RuntimeError):
    """Random instance generation gave up after too many attempts."""


class ReportError(RuntimeError):
    """A run artifact is missing or cannot be parsed."""
