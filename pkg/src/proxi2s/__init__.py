"""Proximal two-stage regression for causal effects under hidden confounding."""
from .data import Dataset, TermSpec, build_design
from .errors import (
    BootstrapError, ConvergenceError, DataError, NumericalError, ProxiError,
    RankDeficientError, SeparationError, SingularJacobianError, UnsupportedModelError,
)
from .glm import fit_glm, fit_multinomial, inverse_link, predict_eta
from .inference import bootstrap, build_system, sandwich, sandwich_for_fit
from .proximal import ModelSpec, ProcedurePlan, TwoStageFit, fit_two_stage, resolve_plan

__version__ = "0.1.0"

__all__ = [
    "Dataset", "TermSpec", "build_design", "fit_glm", "fit_multinomial", "inverse_link",
    "predict_eta", "ModelSpec", "ProcedurePlan", "TwoStageFit", "fit_two_stage", "resolve_plan",
    "bootstrap", "build_system", "sandwich", "sandwich_for_fit",
    "ProxiError", "DataError", "UnsupportedModelError", "NumericalError", "RankDeficientError",
    "ConvergenceError", "SeparationError", "SingularJacobianError", "BootstrapError",
]
