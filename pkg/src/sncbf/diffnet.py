"""Single-hidden-layer smooth network with closed-form derivatives.

The barrier candidate is h(x) = theta1 @ softplus(theta0 @ x + b0) + b1.
Because softplus is C-infinity, the input Jacobian and the noise-weighted
Hessian trace have closed forms, and both are themselves single-layer
networks over the same preactivations with activations phi' and phi''
(the "effective weights" reduction). Parameter gradients of all three
outputs are available analytically.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionMismatch

_SOFTPLUS_SPLIT = 30.0


def activation_chain(z):
    """Softplus and its first three derivatives, overflow-safe.

    Returns (phi, phi1, phi2, phi3) where phi1 is the logistic function,
    phi2 = phi1*(1-phi1) and phi3 = phi2*(1-2*phi1). Accepts scalars or
    arrays.
    """
    z = np.asarray(z, dtype=np.float64)
    phi = np.where(z > _SOFTPLUS_SPLIT, z + np.log1p(np.exp(-np.abs(z))),
                   np.log1p(np.exp(np.minimum(z, _SOFTPLUS_SPLIT))))
    # logistic via the numerically stable tanh identity
    phi1 = 0.5 * (1.0 + np.tanh(0.5 * z))
    phi2 = phi1 * (1.0 - phi1)
    phi3 = phi2 * (1.0 - 2.0 * phi1)
    if z.ndim == 0:
        return float(phi), float(phi1), float(phi2), float(phi3)
    return phi, phi1, phi2, phi3


@dataclass
class NetParams:
    """Weights of the barrier network.

    theta0: (p, n), b0: (p,), theta1: (p,), b1: scalar. theta1 is stored as a
    flat vector (the output layer is 1 x p).
    """

    theta0: np.ndarray
    b0: np.ndarray
    theta1: np.ndarray
    b1: float
    activation: str = "softplus"

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=np.float64)
        self.b0 = np.asarray(self.b0, dtype=np.float64).ravel()
        self.theta1 = np.asarray(self.theta1, dtype=np.float64).ravel()
        self.b1 = float(self.b1)
        if self.theta0.ndim != 2:
            raise DimensionMismatch("theta0 must be 2-D (p, n)")
        p = self.theta0.shape[0]
        if self.b0.shape != (p,) or self.theta1.shape != (p,):
            raise DimensionMismatch("b0/theta1 inconsistent with theta0")
        if self.activation != "softplus":
            raise ValueError(f"unsupported activation: {self.activation}")
        if not (np.all(np.isfinite(self.theta0)) and np.all(np.isfinite(self.b0))
                and np.all(np.isfinite(self.theta1)) and np.isfinite(self.b1)):
            raise ValueError("parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.theta0.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.theta0.shape[0]

    def copy(self) -> "NetParams":
        return NetParams(self.theta0.copy(), self.b0.copy(),
                         self.theta1.copy(), self.b1, self.activation)


@dataclass
class EffectiveWeights:
    """Output weights of the Jacobian and Hessian-trace effective networks.

    theta_hat1 (n, p): Jacobian head, jac(x) = theta_hat1 @ phi'(a).
    theta_bar1 (p,):   Hessian-trace head, ht(x) = theta_bar1 @ phi''(a).
    """

    theta_hat1: np.ndarray
    theta_bar1: np.ndarray


@dataclass
class NetOutputs:
    value: float
    jac: np.ndarray
    hess_trace: float
    preactivation: np.ndarray


def _sigma_sq(sigma_diag, n: int) -> np.ndarray:
    s = np.asarray(sigma_diag, dtype=np.float64).ravel()
    if s.shape != (n,):
        raise DimensionMismatch(f"sigma diagonal must have length {n}")
    return s * s


def forward(params: NetParams, x, sigma_diag) -> NetOutputs:
    """Value, input Jacobian and sigma-weighted Hessian trace at x.

    sigma_diag is the diagonal of the (diagonal) noise matrix.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = params.input_dim
    if x.shape != (n,):
        raise DimensionMismatch(f"x must have length {n}")
    ssq = _sigma_sq(sigma_diag, n)
    a = params.theta0 @ x + params.b0
    phi, phi1, phi2, _ = activation_chain(a)
    value = float(params.theta1 @ phi + params.b1)
    jac = (params.theta1 * phi1) @ params.theta0
    s = (params.theta0 ** 2) @ ssq  # s_j = sum_k sigma_k^2 theta0[j,k]^2
    hess_trace = float((params.theta1 * phi2) @ s)
    return NetOutputs(value=value, jac=jac, hess_trace=hess_trace, preactivation=a)


def effective_weights(params: NetParams, sigma_diag) -> EffectiveWeights:
    """Theorem-2 style reduction of the Jacobian and Hessian-trace heads.

    theta_hat1 = theta0.T @ diag(theta1); theta_bar1[j] = theta1[j] *
    sum_k sigma_k^2 * theta0[j,k]^2. The printed index pattern in the source
    derivation is ill-typed; this form is the one that reproduces forward()
    exactly and is gated by the finite-difference oracle in the tests.
    """
    ssq = _sigma_sq(sigma_diag, params.input_dim)
    theta_hat1 = params.theta0.T * params.theta1  # (n, p)
    theta_bar1 = params.theta1 * ((params.theta0 ** 2) @ ssq)
    return EffectiveWeights(theta_hat1=theta_hat1, theta_bar1=theta_bar1)


def param_gradients(params: NetParams, x, sigma_diag, w_val: float, w_jac, w_hess: float):
    """Gradient w.r.t. all parameters of w_val*value + w_jac.jac + w_hess*ht.

    Returns a dict with keys 'theta0', 'b0', 'theta1', 'b1'.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = params.input_dim
    if x.shape != (n,):
        raise DimensionMismatch(f"x must have length {n}")
    w_jac = np.asarray(w_jac, dtype=np.float64).ravel()
    if w_jac.shape != (n,):
        raise DimensionMismatch(f"w_jac must have length {n}")
    ssq = _sigma_sq(sigma_diag, n)
    t0, t1 = params.theta0, params.theta1
    a = t0 @ x + params.b0
    phi, phi1, phi2, phi3 = activation_chain(a)
    s = (t0 ** 2) @ ssq
    gvec = t0 @ w_jac  # g_j = theta0[j,:] . w_jac

    g_theta1 = w_val * phi + phi1 * gvec + w_hess * phi2 * s
    g_b1 = w_val
    c = t1 * (w_val * phi1 + phi2 * gvec + w_hess * phi3 * s)
    g_b0 = c
    g_theta0 = (np.outer(c, x)
                + np.outer(t1 * phi1, w_jac)
                + 2.0 * w_hess * (t1 * phi2)[:, None] * t0 * ssq[None, :])
    return {"theta0": g_theta0, "b0": g_b0, "theta1": g_theta1, "b1": g_b1}


def batch_weighted_param_gradients(params: NetParams, sigma_diag, X, w_val, w_jac, w_hess):
    """Summed parameter gradient of sum_i w_val[i]*v_i + w_jac[i].jac_i + w_hess[i]*ht_i.

    Vectorized equivalent of summing param_gradients over rows of X; used by
    the training loop where per-sample calls would dominate runtime.
    """
    X = np.asarray(X, dtype=np.float64)
    B, n = X.shape
    ssq = _sigma_sq(sigma_diag, n)
    t0, t1 = params.theta0, params.theta1
    w_val = np.asarray(w_val, dtype=np.float64).ravel()
    w_hess = np.asarray(w_hess, dtype=np.float64).ravel()
    w_jac = np.asarray(w_jac, dtype=np.float64).reshape(B, n)

    A = X @ t0.T + params.b0  # (B, p)
    phi, phi1, phi2, phi3 = activation_chain(A)
    s = (t0 ** 2) @ ssq  # (p,)
    G = w_jac @ t0.T  # (B, p)

    g_theta1 = (w_val[:, None] * phi + phi1 * G + w_hess[:, None] * phi2 * s[None, :]).sum(axis=0)
    g_b1 = float(w_val.sum())
    C = t1[None, :] * (w_val[:, None] * phi1 + phi2 * G + w_hess[:, None] * phi3 * s[None, :])
    g_b0 = C.sum(axis=0)
    g_theta0 = (C.T @ X
                + (t1[None, :] * phi1).T @ w_jac
                + 2.0 * ((w_hess[:, None] * phi2).sum(axis=0) * t1)[:, None] * t0 * ssq[None, :])
    return {"theta0": g_theta0, "b0": g_b0, "theta1": g_theta1, "b1": g_b1}


def _fmt(v: float) -> float:
    # round-trip through the 17-significant-digit decimal representation so
    # that save/load/save is bit-identical
    return float(f"{v:.17g}")


def save_checkpoint(path, params: NetParams, sigma_diag) -> None:
    """Write the model checkpoint JSON (17 significant digits)."""
    sigma_diag = np.asarray(sigma_diag, dtype=np.float64).ravel()
    obj = {
        "input_dim": params.input_dim,
        "hidden_dim": params.hidden_dim,
        "activation": params.activation,
        "theta0": [[_fmt(v) for v in row] for row in params.theta0],
        "b0": [_fmt(v) for v in params.b0],
        "theta1": [_fmt(v) for v in params.theta1],
        "b1": _fmt(params.b1),
        "sigma_diag": [_fmt(v) for v in sigma_diag],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    """Load a checkpoint; returns (NetParams, sigma_diag)."""
    with open(path) as fh:
        obj = json.load(fh)
    params = NetParams(
        theta0=np.array(obj["theta0"], dtype=np.float64),
        b0=np.array(obj["b0"], dtype=np.float64),
        theta1=np.array(obj["theta1"], dtype=np.float64),
        b1=float(obj["b1"]),
        activation=obj.get("activation", "softplus"),
    )
    if params.input_dim != int(obj["input_dim"]) or params.hidden_dim != int(obj["hidden_dim"]):
        raise DimensionMismatch("checkpoint dims inconsistent with weight shapes")
    sigma_diag = np.array(obj["sigma_diag"], dtype=np.float64)
    return params, sigma_diag
