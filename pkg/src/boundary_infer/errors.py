"""Exception types raised by the numerical routines."""

from __future__ import annotations


class BoundaryInferError(Exception):
    """Base class for numerical failures (mapped to exit code 3 by the CLI)."""


class DegenerateKernelError(BoundaryInferError):
    """The Gram matrix is rank deficient beyond what jitter can repair."""


class DegenerateDirectionError(BoundaryInferError):
    """A coefficient direction has (numerically) zero curvature."""


class SingularConstraintError(BoundaryInferError):
    """The two quadratic constraint forms share a null direction."""


class ConvergenceError(BoundaryInferError):
    """An iterative solver hit its iteration cap.

    The best iterate found so far is kept on ``best`` so callers can
    decide whether it is usable.
    """

    def __init__(self, message: str, best=None, best_value=None):
        super().__init__(message)
        self.best = best
        self.best_value = best_value
