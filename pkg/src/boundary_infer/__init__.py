"""Inference for non-negative improvement-in-fit parameters at the boundary."""

from .errors import (
    BoundaryInferError,
    ConvergenceError,
    DegenerateDirectionError,
    DegenerateKernelError,
    SingularConstraintError,
)
from .gof_mi import MiConfig, MiResult, PairSample, run_mi_test
from .gof_quadratic import Dataset, QuadraticGof, assemble
from .inference import InferenceConfig, InferenceResult, infer_from_gof, run_inference
from .nuisance_regression import NuisanceFits, fit_nuisances
from .rank1_qcqp import Rank1Problem, Rank1Solution, solve
from .rkhs_basis import Basis, KernelSpec, build_basis, eval_basis
from .simstudy import SimConfig, SimReport, run_study

__version__ = "0.1.0"

__all__ = [
    "BoundaryInferError",
    "ConvergenceError",
    "DegenerateDirectionError",
    "DegenerateKernelError",
    "SingularConstraintError",
    "MiConfig",
    "MiResult",
    "PairSample",
    "run_mi_test",
    "Dataset",
    "QuadraticGof",
    "assemble",
    "InferenceConfig",
    "InferenceResult",
    "infer_from_gof",
    "run_inference",
    "NuisanceFits",
    "fit_nuisances",
    "Rank1Problem",
    "Rank1Solution",
    "solve",
    "Basis",
    "KernelSpec",
    "build_basis",
    "eval_basis",
    "SimConfig",
    "SimReport",
    "run_study",
]
