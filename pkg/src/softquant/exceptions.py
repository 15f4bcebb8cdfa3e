"""Exception types raised across the package."""


class InvalidInput(ValueError):
    """An input array violates a documented precondition."""


class InvalidRange(ValueError):
    """A quantile range [s, t] with s >= t was requested for a non-constant row."""


class UnderflowError(FloatingPointError):
    """The Gibbs kernel or its scalings degenerated numerically.

    Raised by the scaling-form solver when exp(-C/eps) has an all-zero row or
    column, or when the scaling vectors leave the positive, finite range.
    Use the log-domain solver or a larger epsilon.
    """


class MaxIterExceeded(RuntimeError):
    """The log-domain solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularSchur(RuntimeError):
    """The reduced linear system of the implicit gradients is not solvable.

    Usually indicates a non-converged transport solve or a pathological
    epsilon; the pinning of the first dual variable makes the system
    invertible at any converged solution.
    """


class RowFailures(RuntimeError):
    """One or more rows of a matrix-level operation failed.

    ``failures`` holds ``(row_index, exception)`` pairs.
    """

    def __init__(self, failures):
        self.failures = list(failures)
        detail = "; ".join(f"row {i}: {exc}" for i, exc in self.failures)
        super().__init__(f"{len(self.failures)} row(s) failed: {detail}")


class InnerDivergence(RuntimeError):
    """The inner factorization loop increased its loss."""


class ParseError(ValueError):
    """A persisted file is malformed. ``line`` is the 1-based offending line."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
