"""Control-affine stochastic system models and an Euler-Maruyama simulator.

Built-in models: the inverted pendulum on a limited stable region and a
Dubins-type unicycle avoiding a pedestrian region. Custom models are plain
SystemModel instances.

All randomness goes through numpy's seeded PCG64 generator (standard_normal),
so trajectories are reproducible across platforms for a fixed seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

GRAVITY = 9.81  # m/s^2

DEFAULT_DT = 0.01
DEFAULT_HORIZON = 5.0


class PolicyFailure(Exception):
    """The control policy could not produce an input at a state."""

    def __init__(self, state, message="policy failed"):
        self.state = np.asarray(state, dtype=np.float64)
        super().__init__(f"{message} at state {self.state.tolist()}")


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).ravel()
        self.hi = np.asarray(self.hi, dtype=np.float64).ravel()
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("invalid box bounds")

    def contains(self, x) -> np.ndarray:
        """Vectorized membership; x is (B, n), returns (B,) booleans."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.all((x >= self.lo) & (x <= self.hi), axis=1)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


@dataclass
class SystemModel:
    """Control-affine SDE dx = (f(x) + g(x) u) dt + sigma dW.

    f_batch/g_batch map (B, n) arrays to (B, n) and (B, n, m); membership
    predicates are vectorized the same way.
    """

    name: str
    n: int
    m: int
    f_batch: Callable[[np.ndarray], np.ndarray]
    g_batch: Callable[[np.ndarray], np.ndarray]
    sigma_diag: np.ndarray
    state_box: Box
    safe_membership: Callable[[np.ndarray], np.ndarray]
    unsafe_membership: Callable[[np.ndarray], np.ndarray]
    input_box: Optional[Box] = None  # None means unbounded inputs

    def __post_init__(self):
        self.sigma_diag = np.asarray(self.sigma_diag, dtype=np.float64).ravel()
        if self.sigma_diag.shape != (self.n,):
            raise ValueError("sigma diagonal must have length n")

    def f(self, x) -> np.ndarray:
        xb, single = _as_batch(x)
        out = self.f_batch(xb)
        return out[0] if single else out

    def g(self, x) -> np.ndarray:
        xb, single = _as_batch(x)
        out = self.g_batch(xb)
        return out[0] if single else out

    def in_state(self, x):
        xb, single = _as_batch(x)
        r = np.all((xb >= self.state_box.lo) & (xb <= self.state_box.hi), axis=1)
        return bool(r[0]) if single else r

    def in_safe(self, x):
        xb, single = _as_batch(x)
        r = self.safe_membership(xb)
        return bool(r[0]) if single else r

    def in_unsafe(self, x):
        xb, single = _as_batch(x)
        r = self.unsafe_membership(xb)
        return bool(r[0]) if single else r

    def with_sigma(self, sigma_diag) -> "SystemModel":
        out = SystemModel(self.name, self.n, self.m, self.f_batch, self.g_batch,
                          np.asarray(sigma_diag, dtype=np.float64),
                          self.state_box, self.safe_membership,
                          self.unsafe_membership, self.input_box)
        return out


def pendulum_model() -> SystemModel:
    """Inverted pendulum (m = 1 kg, l = 10 m) on X = [-pi/4, pi/4]^2.

    Safe core [-pi/15, pi/15]^2; unsafe region is the complement of
    [-pi/6, pi/6]^2 within X.
    """
    length = 10.0
    ml2_inv = 0.01  # 1 / (m l^2)

    def f_batch(X):
        out = np.empty_like(X)
        out[:, 0] = X[:, 1]
        out[:, 1] = (GRAVITY / length) * np.sin(X[:, 0])
        return out

    def g_batch(X):
        out = np.zeros((X.shape[0], 2, 1))
        out[:, 1, 0] = ml2_inv
        return out

    quarter = np.pi / 4
    safe_half = np.pi / 15
    core_half = np.pi / 6

    def safe_mem(X):
        return np.all(np.abs(X) <= safe_half, axis=1)

    def unsafe_mem(X):
        inside_state = np.all(np.abs(X) <= quarter, axis=1)
        outside_core = np.any(np.abs(X) > core_half, axis=1)
        return inside_state & outside_core

    return SystemModel(
        name="pendulum", n=2, m=1,
        f_batch=f_batch, g_batch=g_batch,
        sigma_diag=np.array([0.1, 0.1]),
        state_box=Box([-quarter, -quarter], [quarter, quarter]),
        safe_membership=safe_mem,
        unsafe_membership=unsafe_mem,
    )


def dubins_model(disk_unsafe: bool = False) -> SystemModel:
    """Unicycle with constant speed v = 1 on X = [-2, 2]^3.

    Safe region is the road band outside [-1.5, 1.5]^2 in position; the
    unsafe pedestrian region is [-0.2, 0.2]^2 x [-2, 2]. With
    disk_unsafe=True the pedestrian region is the disk x1^2 + x2^2 <= 0.04
    instead (no fidelity claim for that variant).
    """
    v = 1.0

    def f_batch(X):
        out = np.empty_like(X)
        out[:, 0] = v * np.cos(X[:, 2])
        out[:, 1] = v * np.sin(X[:, 2])
        out[:, 2] = 0.0
        return out

    def g_batch(X):
        out = np.zeros((X.shape[0], 3, 1))
        out[:, 2, 0] = 1.0
        return out

    def safe_mem(X):
        inside_state = np.all(np.abs(X) <= 2.0, axis=1)
        outside_band = np.any(np.abs(X[:, :2]) > 1.5, axis=1)
        return inside_state & outside_band

    if disk_unsafe:
        def unsafe_mem(X):
            inside_state = np.all(np.abs(X) <= 2.0, axis=1)
            return inside_state & (X[:, 0] ** 2 + X[:, 1] ** 2 <= 0.04)
    else:
        def unsafe_mem(X):
            inside_state = np.all(np.abs(X) <= 2.0, axis=1)
            return inside_state & np.all(np.abs(X[:, :2]) <= 0.2, axis=1)

    return SystemModel(
        name="dubins", n=3, m=1,
        f_batch=f_batch, g_batch=g_batch,
        sigma_diag=np.array([0.1, 0.1, 0.1]),
        state_box=Box([-2.0] * 3, [2.0] * 3),
        safe_membership=safe_mem,
        unsafe_membership=unsafe_mem,
    )


@dataclass
class TrajectoryLog:
    times: np.ndarray
    states: np.ndarray  # (T, n)
    inputs: np.ndarray  # (T, m); input applied at each step (last row zeros)
    h_values: np.ndarray
    seed: int
    exited_safe: bool

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        header = (["t"] + [f"x{i+1}" for i in range(n)]
                  + [f"u{i+1}" for i in range(m)] + ["h", "exited_safe_flag"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self.times)):
                row = ([f"{self.times[k]:.17g}"]
                       + [f"{v:.17g}" for v in self.states[k]]
                       + [f"{v:.17g}" for v in self.inputs[k]]
                       + [f"{self.h_values[k]:.17g}", int(self.exited_safe)])
                w.writerow(row)


def euler_maruyama_rollout(model: SystemModel, policy, x0, dt: float = DEFAULT_DT,
                           steps: int = 500, seed: int = 0,
                           h_fn=None) -> TrajectoryLog:
    """Simulate x_{k+1} = x_k + (f + g u) dt + sigma sqrt(dt) xi_k.

    policy maps a state to an input (may raise PolicyFailure, which
    propagates). Stops early with exited_safe=True when the state leaves the
    state box. h_fn, if given, logs a scalar along the trajectory.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    if x0.shape != (model.n,):
        raise ValueError("x0 has wrong dimension")
    if not model.in_state(x0):
        raise ValueError("x0 is outside the state set")
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    sqrt_dt = np.sqrt(dt)

    times = [0.0]
    states = [x0.copy()]
    inputs = []
    hs = [float(h_fn(x0)) if h_fn else 0.0]
    x = x0.copy()
    exited = False
    for k in range(steps):
        u = np.asarray(policy(x), dtype=np.float64).ravel()
        if u.shape != (model.m,):
            raise ValueError("policy returned wrong input dimension")
        inputs.append(u.copy())
        xi = rng.standard_normal(model.n)
        x = x + (model.f(x) + model.g(x) @ u) * dt + model.sigma_diag * sqrt_dt * xi
        times.append((k + 1) * dt)
        states.append(x.copy())
        hs.append(float(h_fn(x)) if h_fn else 0.0)
        if not model.in_state(x):
            exited = True
            break
    inputs.append(np.zeros(model.m))
    return TrajectoryLog(
        times=np.asarray(times), states=np.asarray(states),
        inputs=np.asarray(inputs), h_values=np.asarray(hs),
        seed=seed, exited_safe=exited,
    )


def lipschitz_estimate_dynamics(model: SystemModel, u_ref_bound: float = 1.0,
                                samples: int = 20000, seed: int = 0) -> float:
    """Empirical Lipschitz estimate of x -> f(x) + g(x) u over the state box.

    Maximizes the difference quotient over random state pairs and over u on
    the reference-bound sphere (plus u = 0). An estimate only, never a
    certified bound.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    lo, hi = model.state_box.lo, model.state_box.hi
    X = rng.uniform(lo, hi, size=(samples, model.n))
    Y = rng.uniform(lo, hi, size=(samples, model.n))
    dX = X - Y
    norms = np.linalg.norm(dX, axis=1)
    keep = norms > 1e-12
    X, Y, norms = X[keep], Y[keep], norms[keep]
    dF = model.f_batch(X) - model.f_batch(Y)
    dG = model.g_batch(X) - model.g_batch(Y)  # (B, n, m)
    best = float(np.max(np.linalg.norm(dF, axis=1) / norms)) if len(norms) else 0.0
    for _ in range(8):
        u = rng.standard_normal(model.m)
        nu = np.linalg.norm(u)
        u = u * (u_ref_bound / nu) if nu > 0 else u
        d = dF + dG @ u
        q = np.linalg.norm(d, axis=1) / norms
        best = max(best, float(np.max(q)))
    return best
