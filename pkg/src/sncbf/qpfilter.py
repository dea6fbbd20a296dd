"""Closed-form QP safety filter.

The barrier condition at a state is a single affine constraint in the input,
a + b'u >= margin, with a = dh.f + 0.5*ht + gamma*h and b = (dh.g)'. The
minimal-modification QP min ||u - u_ref||^2 then has a closed-form solution:
u_ref if feasible, otherwise the projection of u_ref onto the constraint
hyperplane. With the margin left at its default of 0 this is the runtime
safety filter; training and verification pass margin = -psi so sampled
constraint satisfaction carries the slack Theorem-style generalization
needs (the learning algorithm feeds psi into the filter).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .diffnet import NetParams, forward
from .systems import PolicyFailure, SystemModel

KKT_TOL = 1e-9


class FilterStatus(Enum):
    UNMODIFIED = "unmodified"
    PROJECTED = "projected"
    CLAMPED = "clamped"
    INFEASIBLE = "infeasible"


@dataclass
class FilterResult:
    u: np.ndarray
    modified: bool
    constraint_slack: float  # a + b'u - margin at the returned input
    status: FilterStatus


def solve_affine_qp(a: float, b: np.ndarray, u_ref: np.ndarray,
                    lo=None, hi=None, margin: float = 0.0) -> FilterResult:
    """min ||u - u_ref||^2 s.t. a + b'u >= margin, optionally lo <= u <= hi.

    For bounded inputs the unconstrained projection is clamped coordinatewise
    and feasibility re-checked at the clamped point (sufficient for the m = 1
    case studies; an active-set loop is not needed at this scale).
    """
    b = np.asarray(b, dtype=np.float64).ravel()
    u_ref = np.asarray(u_ref, dtype=np.float64).ravel()
    slack_ref = a + float(b @ u_ref) - margin
    if slack_ref >= 0.0:
        return FilterResult(u=u_ref.copy(), modified=False,
                            constraint_slack=slack_ref, status=FilterStatus.UNMODIFIED)
    bb = float(b @ b)
    if bb == 0.0:
        return FilterResult(u=u_ref.copy(), modified=False,
                            constraint_slack=slack_ref, status=FilterStatus.INFEASIBLE)
    u = u_ref + b * (-slack_ref / bb)
    if lo is not None or hi is not None:
        u_clamped = np.clip(u, lo if lo is not None else -np.inf,
                            hi if hi is not None else np.inf)
        if not np.array_equal(u_clamped, u):
            slack = a + float(b @ u_clamped) - margin
            if slack < -KKT_TOL:
                return FilterResult(u=u_clamped, modified=True,
                                    constraint_slack=slack, status=FilterStatus.INFEASIBLE)
            return FilterResult(u=u_clamped, modified=True,
                                constraint_slack=slack, status=FilterStatus.CLAMPED)
    slack = a + float(b @ u) - margin
    return FilterResult(u=u, modified=True, constraint_slack=slack,
                        status=FilterStatus.PROJECTED)


def constraint_terms(params: NetParams, model: SystemModel, x, gamma: float):
    """(a, b) of the barrier constraint a + b'u >= 0 at state x."""
    out = forward(params, x, model.sigma_diag)
    fx = model.f(x)
    gx = model.g(x)
    a = float(out.jac @ fx) + 0.5 * out.hess_trace + gamma * out.value
    b = out.jac @ gx
    return a, b


def qp_filter(params: NetParams, model: SystemModel, x, u_ref,
              gamma: float = 1.0, margin: float = 0.0) -> FilterResult:
    """Minimally modify u_ref so the barrier constraint holds at x."""
    u_ref = np.asarray(u_ref, dtype=np.float64).ravel()
    if u_ref.shape != (model.m,):
        raise ValueError("u_ref has wrong dimension")
    a, b = constraint_terms(params, model, x, gamma)
    lo = hi = None
    if model.input_box is not None:
        lo, hi = model.input_box.lo, model.input_box.hi
    return solve_affine_qp(a, b, u_ref, lo=lo, hi=hi, margin=margin)


def filtered_policy(params: NetParams, model: SystemModel,
                    u_ref_fn: Optional[Callable] = None, gamma: float = 1.0,
                    margin: float = 0.0,
                    u_clip: Optional[float] = None) -> Callable:
    """Compose the QP filter over a reference controller (default zero).

    The returned policy raises PolicyFailure when the filter is infeasible,
    carrying the offending state. u_clip, if given, saturates the filtered
    input at +-u_clip per coordinate: near states where the barrier's input
    gain vanishes the exact QP solution grows unboundedly, and applying it
    for a full discrete time step throws the state much farther than the
    constraint deficit it corrects. The clip trades an O(eps) temporary
    constraint violation for bounded actuation, which is also what physical
    hardware would do.
    """
    def policy(x):
        u_ref = (np.zeros(model.m) if u_ref_fn is None
                 else np.asarray(u_ref_fn(x), dtype=np.float64).ravel())
        res = qp_filter(params, model, x, u_ref, gamma=gamma, margin=margin)
        if res.status is FilterStatus.INFEASIBLE:
            raise PolicyFailure(x, "QP safety filter infeasible")
        if u_clip is not None:
            return np.clip(res.u, -u_clip, u_clip)
        return res.u

    return policy
