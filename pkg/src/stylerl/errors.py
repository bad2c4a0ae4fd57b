"""Exception types shared across the package."""


class StyleRLError(Exception):
    pass


class DimensionError(StyleRLError, ValueError):
    """Shapes are incompatible with the requested operation."""


class DomainError(StyleRLError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class ParameterError(StyleRLError, ValueError):
    """A scalar argument (factor, coefficient, step count) is out of range."""


class ContractError(StyleRLError, RuntimeError):
    """A call-site precondition was violated."""


class FormatError(StyleRLError, ValueError):
    """A serialized artifact is malformed or does not match the expected layout."""


class NumericError(StyleRLError, ArithmeticError):
    """A loss or parameter became non-finite."""
