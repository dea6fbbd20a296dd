"""Stochastic neural control barrier functions: training, grid certification
over a state box, and QP-based safety filtering for control-affine SDEs."""

from .diffnet import NetParams, forward, effective_weights, load_checkpoint, save_checkpoint
from .lipcert import CertificateReport, Infeasible, LipschitzBudget, certify
from .qpfilter import FilterResult, FilterStatus, filtered_policy, qp_filter
from .scenario import (BudgetExceeded, CoverSpec, MarginQPController,
                       ScenarioData, SOPResult, build_cover, solve_sop,
                       stream_verify, validity_check)
from .systems import PolicyFailure, SystemModel, dubins_model, euler_maruyama_rollout, pendulum_model

__version__ = "0.1.0"

__all__ = [
    "NetParams", "forward", "effective_weights", "load_checkpoint", "save_checkpoint",
    "CertificateReport", "Infeasible", "LipschitzBudget", "certify",
    "FilterResult", "FilterStatus", "filtered_policy", "qp_filter",
    "BudgetExceeded", "CoverSpec", "MarginQPController", "ScenarioData",
    "SOPResult", "build_cover", "solve_sop", "stream_verify", "validity_check",
    "PolicyFailure", "SystemModel", "dubins_model", "euler_maruyama_rollout",
    "pendulum_model",
    "__version__",
]
