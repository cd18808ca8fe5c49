"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(ArithmeticError):
    """NaN/Inf appeared during training or a probability map left (0, 1)."""


class FormatError(ValueError):
    """A file on disk is malformed, truncated, or of the wrong version."""
