"""Exception types shared across the package."""


class FlueError(Exception):
    """Base class for every error raised by this package."""


class NonConvergent(FlueError):
    pass


class GenerationFailed(FlueError):
    pass


class InfeasibleRow(FlueError):
    pass


class InfeasibleEncoding(FlueError):
    pass


class NotSIA(FlueError):
    pass


class GammaMismatch(FlueError):
    pass


class AssemblyInconsistent(FlueError):
    pass


class DegenerateSpectrum(FlueError):
    pass


class RankDeficient(FlueError):
    pass


class DimensionMismatch(FlueError):
    pass


class NonFinite(FlueError):
    """Raised when a run produces NaN/Inf or leaves the divergence guard."""

    def __init__(self, message, cycle=None, slot=None, node=None):
        super().__init__(message)
        self.cycle = cycle
        self.slot = slot
        self.node = node


class ZeroReference(FlueError):
    pass


class NotDecaying(FlueError):
    pass


class ParseError(FlueError):
    def __init__(self, message, line, column=1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ValidationError(FlueError):
    pass
