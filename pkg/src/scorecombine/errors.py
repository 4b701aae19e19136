"""Exception hierarchy.

The CLI maps ``SchemaError`` (and plain ``ValueError`` from argument checks)
to exit code 2 and ``DataError``/``NumericError`` to exit code 3.
"""


class DomainError(ValueError):
    """An argument lies outside the domain of a mathematical function."""


class DegenerateDistributionError(DomainError):
    """A distribution parameter makes the distribution a point mass."""


class SchemaError(ValueError):
    """Input columns, headers or configuration do not match what is expected."""


class DataError(ValueError):
    """Input values are unusable (non-finite, too few samples, corrupt file)."""


class NumericError(ArithmeticError):
    """An iterative solver failed to converge.

    Attributes:
        residual: the last residual reached before giving up.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual
