"""Gradient-based hyperparameter search on the cross-validation loss.

Learners are written as convex programs whose solutions are differentiated
through their optimality conditions; the resulting gradients drive projected
gradient descent over hyperparameters.
"""

from .baselines import SearchSpace, grid_search, random_search
from .cvgm import (CvgmConfig, ElasticNetCV, KernelLogisticCV, LogisticCV, LossCombinationCV,
                   Projection, cv_loss_and_grad, cvgm_run, project)
from .dataset import Dataset, Split, make_regression, make_rings, make_xor, sample_splits
from .errors import (ConvergenceError, CvgradError, DifferentiabilityError, DivergenceError,
                     FoldError, ProblemError)
from .kkt_diff import QpPerturbation, QpProblem, qp_jacobian, qp_solve

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "CvgmConfig", "CvgradError", "Dataset", "DifferentiabilityError",
    "DivergenceError", "ElasticNetCV", "FoldError", "KernelLogisticCV", "LogisticCV",
    "LossCombinationCV", "ProblemError", "Projection", "QpPerturbation", "QpProblem",
    "SearchSpace", "Split", "cv_loss_and_grad", "cvgm_run", "grid_search", "make_regression",
    "make_rings", "make_xor", "project", "qp_jacobian", "qp_solve", "random_search",
    "sample_splits",
]
