"""Exception hierarchy shared by every subsystem.

The CLI maps any :class:`MsiSegError` to exit status 1 and prints its
``kind`` tag so failures are machine-parseable.
"""


class MsiSegError(Exception):
    kind = "error"


class FormatError(MsiSegError, ValueError):
    kind = "format"


class ShapeError(MsiSegError, ValueError):
    kind = "shape"


class ArgumentError(MsiSegError, ValueError):
    kind = "argument"


class StateError(MsiSegError, RuntimeError):
    kind = "state"


class NumericError(MsiSegError, FloatingPointError):
    kind = "numeric"


class DegenerateStatisticsError(MsiSegError, ValueError):
    kind = "degenerate-statistics"


class DegenerateBatchError(MsiSegError, ValueError):
    kind = "degenerate-batch"


class EmptyBatchError(MsiSegError, ValueError):
    kind = "empty-batch"


class RankError(MsiSegError, ValueError):
    kind = "rank"


class ConvergenceError(MsiSegError, RuntimeError):
    kind = "convergence"

    def __init__(self, message, iterations=None, history=None):
        super().__init__(message)
        self.iterations = iterations
        self.history = history or []


class NoModelFound(MsiSegError):
    """RANSAC could not find a homography with enough support."""

    kind = "no-model"


class DivergenceError(MsiSegError, RuntimeError):
    kind = "divergence"


class TruncatedFileError(MsiSegError, OSError):
    kind = "io"
