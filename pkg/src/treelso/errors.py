"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalDomainError(ArithmeticError):
    """Raised when a numerical routine is handed data outside its domain."""


class FormatError(ValueError):
    """Raised when a file does not parse as the expected container format."""
