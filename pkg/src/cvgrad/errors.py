"""Exception types shared across the package."""

from __future__ import annotations


class CvgradError(Exception):
    """Base class for solver and pipeline failures."""


class ProblemError(CvgradError):
    """Malformed optimization problem (dimensions, non-PD quadratic term)."""


class ConvergenceError(CvgradError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class DifferentiabilityError(CvgradError):
    def __init__(self, message: str, smallest_singular_value: float = float("nan")):
        super().__init__(f"{message} (smallest singular value={smallest_singular_value:.3e})")
        self.smallest_singular_value = smallest_singular_value


class FoldError(CvgradError):
    """A learner failed on one cross-validation fold."""

    def __init__(self, fold_index: int, cause: Exception):
        super().__init__(f"fold {fold_index} failed: {cause}")
        self.fold_index = fold_index
        self.cause = cause


class DivergenceError(CvgradError):
    pass
