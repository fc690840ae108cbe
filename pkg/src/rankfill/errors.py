"""Exception hierarchy. The CLI maps each family to an exit code."""


class RankfillError(Exception):
    exit_code = 1


class ConfigurationError(RankfillError, ValueError):
    """Invalid parameters or distributions."""

    exit_code = 1


class DimensionError(ConfigurationError):
    """Shapes of two matrix views do not agree."""


class DataError(RankfillError, ValueError):
    """Malformed or unsupported input data."""

    exit_code = 2


class UnsupportedInputError(DataError):
    pass


class InconsistencyError(DataError):
    """Observations admit no exact rank-1 completion.

    ``edge`` is the (row, col) of the observation that closes the offending cycle.
    """

    def __init__(self, message, edge=None):
        super().__init__(message)
        self.edge = edge


class InfeasibleEdgeError(DataError):
    def __init__(self, message, edge=None):
        super().__init__(message)
        self.edge = edge


class NumericalError(RankfillError, ArithmeticError):
    """A numerical routine failed to converge."""

    exit_code = 3

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
