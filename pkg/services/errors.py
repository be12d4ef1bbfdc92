"""Error hierarchy for gridflex services."""


class GridFlexError(Exception):
    """Base error; exit_code is what the CLI returns for it."""
    exit_code = 4


class InputError(GridFlexError):
    """Malformed or inconsistent input document, table or config."""
    exit_code = 3


class TopologyError(InputError):
    """Network graph violates referential integrity or radiality."""


class MeasurementError(InputError):
    """Measurement series unusable for estimation."""


class NumericError(GridFlexError):
    """Non-finite values appeared in a numerical iteration."""


class ConvergenceError(GridFlexError):
    """An iteration that had to converge did not."""


class InfeasibleError(GridFlexError):
    """Optimization problem has no feasible point."""
    exit_code = 2


class SolverError(GridFlexError):
    """Solver failed, reported unbounded, or rejected the program."""
