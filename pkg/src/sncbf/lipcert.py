"""Semidefinite Lipschitz certificates and the log-det barrier loss.

A single-layer network with slope-restricted activation admits an LMI
certificate: positive semidefiniteness of a block matrix M built from the
weights, a diagonal multiplier Lambda > 0, the target bound L and the
activation slope interval (alpha, beta). Three certificates are maintained:
the barrier value itself, its Jacobian head and its Hessian-trace head (the
two effective networks share theta0 and differ in output map and slopes).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffnet
from .diffnet import NetParams, effective_weights
from .linalg import (DimensionMismatch, NotPositiveDefinite, cholesky,
                     log_det_pd, symmetric_block_assemble)

# max |phi'''| for softplus: t(1-t)(1-2t) at t = (3 - sqrt(3))/6
PHI3_SLOPE_MAX = 1.0 / (6.0 * np.sqrt(3.0))

CERT_NAMES = ("h", "dh", "d2h")


class Infeasible(Exception):
    """A certificate matrix left the PD cone; the barrier is undefined."""


@dataclass
class SlopeBounds:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha > self.beta:
            raise ValueError("alpha must not exceed beta")


def slope_bounds(level: str) -> SlopeBounds:
    """Global slope interval of the activation at the given head.

    value -> slopes of softplus (logistic range), jacobian -> slopes of
    phi' (range of phi''), hessian_trace -> slopes of phi'' (range of
    phi''', genuinely two-sided).
    """
    if level == "value":
        return SlopeBounds(0.0, 1.0)
    if level == "jacobian":
        return SlopeBounds(0.0, 0.25)
    if level == "hessian_trace":
        return SlopeBounds(-PHI3_SLOPE_MAX, PHI3_SLOPE_MAX)
    raise ValueError(f"unknown certificate level: {level}")


@dataclass
class LipschitzBudget:
    """Lipschitz bounds and cover radius entering the validity condition."""

    L_h: float
    L_dh: float
    L_d2h: float
    L_x: float
    eps_bar: float
    delta: float = 1e-3
    L_max_override: Optional[float] = None

    def __post_init__(self):
        for name in ("L_h", "L_dh", "L_d2h", "L_x", "eps_bar", "delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.L_max_override is not None and self.L_max_override <= 0:
            raise ValueError("L_max_override must be positive")

    @property
    def L_max_formula(self) -> float:
        return max(self.L_h, self.L_h + self.L_dh * self.L_x + self.L_d2h)

    @property
    def L_max(self) -> float:
        if self.L_max_override is not None:
            return self.L_max_override
        return self.L_max_formula


def build_M_single_layer(theta0, theta_out, lambda_diag, L: float,
                         slopes: SlopeBounds) -> np.ndarray:
    """Assemble the (n+p+out)-square certificate matrix.

    [[L^2 I + 2ab th0' La th0,  -(a+b) th0' La,  0    ],
     [-(a+b) La th0,            2 La,            -out'],
     [0,                        -out,            I    ]]

    Assembled symmetrically (not symmetrized after the fact).
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    theta_out = np.atleast_2d(np.asarray(theta_out, dtype=np.float64))
    lam = np.asarray(lambda_diag, dtype=np.float64).ravel()
    p, n = theta0.shape
    out = theta_out.shape[0]
    if theta_out.shape[1] != p or lam.shape != (p,):
        raise DimensionMismatch("theta_out/lambda inconsistent with theta0")
    if np.any(lam <= 0):
        raise ValueError("Lambda entries must be strictly positive")
    a, b = slopes.alpha, slopes.beta
    t0l = theta0.T * lam  # theta0.T @ diag(lam), (n, p)
    B12 = -(a + b) * t0l
    B23 = -theta_out.T
    # theta0' La theta0 is symmetric analytically; mirror the upper triangle
    # so the assembled matrix is exactly symmetric bit for bit
    quad = t0l @ theta0
    quad = np.triu(quad) + np.triu(quad, 1).T
    return symmetric_block_assemble([
        [L * L * np.eye(n) + 2.0 * a * b * quad, B12, np.zeros((n, out))],
        [B12.T, 2.0 * np.diag(lam), B23],
        [np.zeros((out, n)), B23.T, np.eye(out)],
    ], check_symmetry=True)


def _cert_matrices(params: NetParams, sigma_diag, budget: LipschitzBudget, lambdas):
    """The three certificate matrices M1 (value), M2 (Jacobian), M3 (trace)."""
    eff = effective_weights(params, sigma_diag)
    lam, lam_hat, lam_bar = lambdas
    M1 = build_M_single_layer(params.theta0, params.theta1, lam,
                              budget.L_h, slope_bounds("value"))
    M2 = build_M_single_layer(params.theta0, eff.theta_hat1, lam_hat,
                              budget.L_dh, slope_bounds("jacobian"))
    M3 = build_M_single_layer(params.theta0, eff.theta_bar1, lam_bar,
                              budget.L_d2h, slope_bounds("hessian_trace"))
    return M1, M2, M3


@dataclass
class CertificateEntry:
    name: str
    L_bound: float
    pd_pass: bool
    min_pivot: float
    log_det: Optional[float] = None


@dataclass
class CertificateReport:
    entries: dict

    @property
    def all_pass(self) -> bool:
        return all(e.pd_pass for e in self.entries.values())

    def to_json_dict(self) -> dict:
        return {
            name: {
                "L": e.L_bound,
                "pd": e.pd_pass,
                "log_det": e.log_det,
                "min_pivot": e.min_pivot,
            }
            for name, e in self.entries.items()
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=1)


def certify(params: NetParams, sigma_diag, budget: LipschitzBudget,
            lambdas) -> CertificateReport:
    """PD verdicts for the three certificates. Failures are reported, not raised."""
    Ms = _cert_matrices(params, sigma_diag, budget, lambdas)
    bounds = (budget.L_h, budget.L_dh, budget.L_d2h)
    entries = {}
    for name, M, L in zip(CERT_NAMES, Ms, bounds):
        try:
            fac = cholesky(M)
            d = np.diag(fac)
            entries[name] = CertificateEntry(
                name=name, L_bound=L, pd_pass=True,
                min_pivot=float(np.min(d * d)),
                log_det=2.0 * float(np.sum(np.log(d))),
            )
        except NotPositiveDefinite as exc:
            entries[name] = CertificateEntry(
                name=name, L_bound=L, pd_pass=False,
                min_pivot=exc.pivot_value, log_det=None,
            )
    return CertificateReport(entries=entries)


def _neg_logdet_grads(M: np.ndarray, theta0, theta_out, lam, slopes: SlopeBounds,
                      jitter: float = 0.0):
    """Gradients of -log det M w.r.t. theta0, theta_out and lambda diagonal.

    Uses d(-log det M)/ds = -<M^{-1}, dM/ds> with M^{-1} from the Cholesky
    factor; dM/ds assembled analytically per block.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    theta_out = np.atleast_2d(np.asarray(theta_out, dtype=np.float64))
    lam = np.asarray(lam, dtype=np.float64).ravel()
    p, n = theta0.shape
    out = theta_out.shape[0]
    L_fac = cholesky(M, jitter=jitter)
    Linv = np.linalg.inv(L_fac)
    P = Linv.T @ Linv  # M^{-1}, symmetric
    P11 = P[:n, :n]
    P12 = P[:n, n:n + p]
    P22 = P[n:n + p, n:n + p]
    P23 = P[n:n + p, n + p:]
    a, b = slopes.alpha, slopes.beta

    # d<P, M>/dtheta0 from blocks (1,1) and (1,2)+(2,1)
    g_theta0 = (2.0 * a * b * 2.0 * (lam[:, None] * (theta0 @ P11))
                - 2.0 * (a + b) * (lam[:, None] * P12.T))
    # theta_out enters only via blocks (2,3)+(3,2)
    g_theta_out = -2.0 * P23.T  # (out, p)
    # lambda: blocks (1,1), (1,2)+(2,1), (2,2)
    th0P12 = theta0 @ P12  # (p, p)
    g_lam = (2.0 * a * b * np.einsum("ij,ij->i", theta0 @ P11, theta0)
             - 2.0 * (a + b) * np.diag(th0P12)
             + 2.0 * np.diag(P22))
    # gradient of MINUS log det
    return -g_theta0, -g_theta_out, -g_lam


def barrier_loss_and_grad(params: NetParams, sigma_diag, budget: LipschitzBudget,
                          lambdas, coeffs, jitter: float = 0.0):
    """Log-det barrier -sum c_i log det(M_i) and its analytic gradients.

    Returns (loss, grads) where grads has keys 'theta0', 'theta1' and
    'lambdas' (tuple of three diagonal gradients). Raises Infeasible when any
    certificate matrix is not PD; callers must back-track, the barrier has no
    value outside the cone.
    """
    c1, c2, c3 = coeffs
    if min(c1, c2, c3) <= 0:
        raise ValueError("barrier coefficients must be positive")
    sigma_diag = np.asarray(sigma_diag, dtype=np.float64).ravel()
    ssq = sigma_diag * sigma_diag
    eff = effective_weights(params, sigma_diag)
    lam, lam_hat, lam_bar = [np.asarray(l, dtype=np.float64).ravel() for l in lambdas]
    M1, M2, M3 = _cert_matrices(params, sigma_diag, budget, (lam, lam_hat, lam_bar))

    try:
        ld1 = log_det_pd(M1)
        ld2 = log_det_pd(M2)
        ld3 = log_det_pd(M3)
    except NotPositiveDefinite as exc:
        raise Infeasible(str(exc)) from exc
    loss = -(c1 * ld1 + c2 * ld2 + c3 * ld3)

    t0, t1 = params.theta0, params.theta1
    s = (t0 ** 2) @ ssq  # (p,)

    g1_t0, g1_out, g1_lam = _neg_logdet_grads(M1, t0, t1, lam, slope_bounds("value"), jitter)
    g2_t0, g2_out, g2_lam = _neg_logdet_grads(M2, t0, eff.theta_hat1, lam_hat,
                                              slope_bounds("jacobian"), jitter)
    g3_t0, g3_out, g3_lam = _neg_logdet_grads(M3, t0, eff.theta_bar1, lam_bar,
                                              slope_bounds("hessian_trace"), jitter)

    # M1: theta_out = theta1 directly
    g_theta1 = c1 * g1_out.ravel()
    g_theta0 = c1 * g1_t0 + c2 * g2_t0 + c3 * g3_t0
    # M2: theta_hat1[k, j] = theta0[j, k] * theta1[j]
    g_theta0 += c2 * (g2_out.T * t1[:, None])
    g_theta1 += c2 * np.einsum("kj,jk->j", g2_out, t0)
    # M3: theta_bar1[j] = theta1[j] * s_j, s_j = sum_k ssq_k theta0[j,k]^2
    g3o = g3_out.ravel()
    g_theta1 += c3 * g3o * s
    g_theta0 += c3 * (g3o * t1)[:, None] * 2.0 * t0 * ssq[None, :]

    grads = {
        "theta0": g_theta0,
        "theta1": g_theta1,
        "lambdas": (c1 * g1_lam, c2 * g2_lam, c3 * g3_lam),
    }
    return loss, grads


def _analytic_lambda_logs(theta0, out_map, floor=1e-8):
    """Closed-form diagonal scaling that certifies the product bound.

    With c_j the norm of the j-th output column and r_j = ||theta0_j||, the
    choice Lambda_jj = c_j * sum_k(c_k r_k) / (2 r_j) satisfies the coupling
    block exactly and keeps the input block as small as the layer allows.
    """
    C = np.atleast_2d(np.asarray(out_map, dtype=np.float64))
    c = np.linalg.norm(C, axis=0)
    r = np.linalg.norm(theta0, axis=1)
    s = float(np.sum(c * r))
    lam = c * s / (2.0 * np.maximum(r, floor))
    return np.log(np.maximum(lam, floor))


def lambda_repair(params: NetParams, sigma_diag, budget: LipschitzBudget,
                  lambda_logs, iters: int = 200, lr: float = 0.05,
                  floor: float = 1e-10):
    """Search the (convex) Lambda feasibility set by min-eigenvalue ascent.

    The certificate matrices are affine in the Lambda diagonals, so when a
    weight update leaves a matrix indefinite the scalings can often be moved
    back to feasibility without touching the weights. For each failing level
    the closed-form product-bound scaling is tried as an alternative starting
    point before the ascent. Returns (new_logs, ok); on failure the caller
    should fall back to reverting the weights.
    """
    levels = [slope_bounds("value"), slope_bounds("jacobian"),
              slope_bounds("hessian_trace")]
    logs = [np.array(l, dtype=np.float64, copy=True) for l in lambda_logs]
    n = params.theta0.shape[1]
    t0 = params.theta0
    eff = effective_weights(params, sigma_diag)
    out_maps = [params.theta1, eff.theta_hat1, eff.theta_bar1]
    Ms = _cert_matrices(params, sigma_diag, budget, tuple(np.exp(l) for l in logs))
    for i, M in enumerate(Ms):
        if np.linalg.eigvalsh(M)[0] > floor:
            continue
        cand = [np.array(l, copy=True) for l in logs]
        cand[i] = _analytic_lambda_logs(t0, out_maps[i])
        Mc = _cert_matrices(params, sigma_diag, budget,
                            tuple(np.exp(l) for l in cand))[i]
        if np.linalg.eigvalsh(Mc)[0] > np.linalg.eigvalsh(M)[0]:
            logs[i] = cand[i]
    for _ in range(iters):
        lams = tuple(np.exp(l) for l in logs)
        Ms = _cert_matrices(params, sigma_diag, budget, lams)
        done = True
        for i, M in enumerate(Ms):
            w, V = np.linalg.eigh(M)
            if w[0] > floor:
                continue
            done = False
            v = V[:, 0]
            vx = v[:n]
            vh = v[n:n + t0.shape[0]]
            a, b = levels[i].alpha, levels[i].beta
            proj = t0 @ vx  # (p,) theta0_j . vx
            g = 2.0 * a * b * proj ** 2 - 2.0 * (a + b) * vh * proj + 2.0 * vh ** 2
            logs[i] = logs[i] + lr * g * np.exp(logs[i])
        if done:
            return tuple(logs), True
    return tuple(logs), False
