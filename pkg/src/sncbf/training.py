"""Joint training of the barrier network, the certificate scalings and psi.

One epoch interleaves three Adam families over shuffled mini-batches: a task
step on the network weights (hinge losses L1..L3), a barrier step on the
weights and the three Lambda log-diagonals (log-det certificate barrier), and
a scalar step on psi (validity hinge plus the hinge activity fractions). At
every epoch boundary psi is re-synchronized to the exact sampled optimum so
the final certificate never relies on the learned surrogate.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .diffnet import NetParams, batch_weighted_param_gradients, save_checkpoint
from .lipcert import (Infeasible, LipschitzBudget, barrier_loss_and_grad,
                      certify, lambda_repair)
from .scenario import MarginQPController, ScenarioData, h_batch, solve_sop
from .systems import Box, PolicyFailure, SystemModel
from . import kernels

# hinge activity guard: filter-active samples sit at q3 == psi up to rounding,
# and an exact > 0 test would flip their O(1) gradient on noise
ACTIVITY_EPS = 1e-12
MAX_REVERTS = 10


class Adam:
    """Adam over a dict of arrays/scalars; state keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    def reset(self) -> None:
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, values: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for key, val in values.items():
            g = np.asarray(grads[key], dtype=np.float64)
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            mhat = self.m[key] / (1 - b1 ** self.t)
            vhat = self.v[key] / (1 - b2 ** self.t)
            upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            new = np.asarray(val, dtype=np.float64) - upd
            out[key] = float(new) if np.isscalar(val) or np.ndim(val) == 0 else new
        return out


@dataclass
class TrainConfig:
    budget: LipschitzBudget
    gamma: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    c_l1: float = 1e-4
    c_l2: float = 1e-4
    c_l3: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 2000
    lr_theta: float = 1e-3
    lr_lambda: float = 1e-3
    lr_psi: float = 1e-3
    # weight on the validity hinge in the psi step; above 1 + lambda1 + lambda2
    # it dominates every activity fraction, so psi descends to the static
    # target -L_max*eps_bar instead of parking at an activity quantile
    v_weight: float = 4.0
    seed: int = 0
    hidden: int = 20
    loss_theta_tol: float = 1e-8
    v_tol: float = 0.0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    # warm-start fit before the certified loop: hinge classification on the
    # safe/unsafe samples with a weight-norm penalty, then a Lambda repair.
    # Skipped when pretrain_steps is 0.
    pretrain_steps: int = 0
    pretrain_rho: float = 3e-4
    pretrain_margin: float = 0.05
    pretrain_floor_slack: float = 1.0
    # saturation level for the extra derivative hinge near the level set;
    # None disables it. The exact QP input is unbounded, so a deployed
    # (actuator-limited) filter leaks wherever the barrier's input gain
    # vanishes while its drift deficit does not; this hinge trains those
    # ridges away in the band the closed loop actually visits
    pretrain_u_clip: Optional[float] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "c_l1", "c_l2", "c_l3",
                     "lr_theta", "lr_lambda", "lr_psi", "v_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.hidden < 1:
            raise ValueError("batch_size and hidden must be >= 1")
        if self.max_epochs < 0 or self.loss_theta_tol < 0 or self.v_tol < 0:
            raise ValueError("max_epochs and tolerances must be non-negative")
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be non-negative")
        if self.pretrain_rho <= 0 or self.pretrain_margin <= 0:
            raise ValueError("pretrain_rho and pretrain_margin must be positive")
        if self.pretrain_floor_slack <= 0:
            raise ValueError("pretrain_floor_slack must be positive")

    def hash(self) -> str:
        d = asdict(self)
        d.pop("out_dir", None)
        blob = json.dumps(d, sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainState:
    params: NetParams
    psi: float  # learned scalar driving the hinges and the filter margin
    lambda_logs: tuple  # three (p,) log-diagonals, Lambda_i = diag(exp(l_i))
    psi_star: Optional[float] = None  # exact SOP optimum from the last re-sync
    epoch: int = 0
    lr_theta: float = 1e-3
    revert_count: int = 0
    aborted: bool = False
    history: list = field(default_factory=list)

    def lambdas(self):
        return tuple(np.exp(l) for l in self.lambda_logs)

    def snapshot(self) -> "TrainState":
        return TrainState(params=self.params.copy(), psi=self.psi,
                          lambda_logs=tuple(l.copy() for l in self.lambda_logs),
                          epoch=self.epoch, lr_theta=self.lr_theta,
                          revert_count=self.revert_count, aborted=self.aborted,
                          history=list(self.history))


def validity_loss(psi: float, budget: LipschitzBudget):
    """Hinge on the certified margin L_max*eps_bar + psi (closed at zero)."""
    margin = budget.L_max * budget.eps_bar + psi
    if margin > 0.0:
        return {"Lv": margin, "dpsi": 1.0}
    return {"Lv": 0.0, "dpsi": 0.0}


def _controller_inputs(model: SystemModel, X: np.ndarray):
    FX = model.f_batch(X)
    GX = model.g_batch(X)
    if model.input_box is not None:
        u_lo, u_hi = model.input_box.lo, model.input_box.hi
    else:
        u_lo = np.full(model.m, -np.inf)
        u_hi = np.full(model.m, np.inf)
    return FX, GX, u_lo, u_hi


def _q3_and_inputs(params, model, X, budget, gamma, controller):
    """q3 values and the closed-loop drift f+gu for a batch of D samples."""
    FX, GX, u_lo, u_hi = _controller_inputs(model, X)
    if isinstance(controller, MarginQPController):
        zeros = np.zeros(len(X), dtype=bool)
        _, _, q3, _, _, U, _ = kernels.q_batch(
            params.theta0, params.b0, params.theta1, params.b1,
            model.sigma_diag ** 2, X, FX, GX, zeros, zeros,
            budget.delta, gamma, controller.margin, u_lo, u_hi)
        U = np.asarray(U)
    else:
        U = np.zeros((len(X), model.m))
        for i, x in enumerate(X):
            try:
                U[i] = controller(x)
            except PolicyFailure:
                U[i] = 0.0  # violation flows into the loss instead of aborting
        h = h_batch(params, X)
        A = X @ params.theta0.T + params.b0
        from .diffnet import activation_chain
        _, phi1, phi2, _ = activation_chain(A)
        xdot = FX + np.einsum("bnm,bm->bn", GX, U)
        jac_dot = ((phi1 * params.theta1) * (xdot @ params.theta0.T)).sum(axis=1)
        s = (params.theta0 ** 2) @ (model.sigma_diag ** 2)
        ht = (phi2 * params.theta1 * s).sum(axis=1)
        q3 = -jac_dot - 0.5 * ht - gamma * h
        xdot_all = xdot
        return np.asarray(q3), U, xdot_all
    xdot = FX + np.einsum("bnm,bm->bn", GX, U)
    return np.asarray(q3), U, xdot


def scenario_losses(params: NetParams, psi: float, data: ScenarioData,
                    controller, model: SystemModel, budget: LipschitzBudget,
                    gamma: float, lambda1: float = 1.0, lambda2: float = 1.0,
                    with_grads: bool = True):
    """Hinge means L1..L3 and gradients of L1 + lambda1*L2 + lambda2*L3.

    L1 penalizes h < -psi... precisely: mean(max(0, q_k - psi)) with q1 = -h
    on S, q2 = h + delta on U, q3 the derivative condition on D at the
    controller's input. Subgradient at the kink is 0; activity uses a small
    epsilon so filter-active samples (q3 == psi up to rounding) stay inactive.
    """
    nS, nU, nD = len(data.S), len(data.U), len(data.D)
    h_S = h_batch(params, data.S) if nS else np.zeros(0)
    h_U = h_batch(params, data.U) if nU else np.zeros(0)
    if nD:
        q3, _, xdot = _q3_and_inputs(params, model, data.D, budget, gamma, controller)
    else:
        q3, xdot = np.zeros(0), np.zeros((0, model.n))

    r1 = -h_S - psi
    r2 = h_U + budget.delta - psi
    r3 = q3 - psi
    a1 = r1 > ACTIVITY_EPS
    a2 = r2 > ACTIVITY_EPS
    a3 = r3 > ACTIVITY_EPS
    L1 = float(np.sum(r1[a1]) / nS) if nS else 0.0
    L2 = float(np.sum(r2[a2]) / nU) if nU else 0.0
    L3 = float(np.sum(r3[a3]) / nD) if nD else 0.0
    out = {"L1": L1, "L2": L2, "L3": L3,
           "L_theta": L1 + lambda1 * L2 + lambda2 * L3}
    f1 = float(np.mean(a1)) if nS else 0.0
    f2 = float(np.mean(a2)) if nU else 0.0
    f3 = float(np.mean(a3)) if nD else 0.0
    out["dpsi"] = -(f1 + lambda1 * f2 + lambda2 * f3)
    if not with_grads:
        return out

    # one fused weighted-gradient pass over the concatenated sample sets
    X_all = np.vstack([data.S, data.U, data.D])
    B = len(X_all)
    w_val = np.zeros(B)
    w_jac = np.zeros((B, model.n))
    w_hess = np.zeros(B)
    if nS:
        w_val[:nS] = np.where(a1, -1.0 / nS, 0.0)
    if nU:
        w_val[nS:nS + nU] = np.where(a2, lambda1 / nU, 0.0)
    if nD:
        sel = np.where(a3, lambda2 / nD, 0.0)
        w_val[nS + nU:] = -gamma * sel
        w_jac[nS + nU:] = -sel[:, None] * xdot
        w_hess[nS + nU:] = -0.5 * sel
    out["grad_theta"] = batch_weighted_param_gradients(
        params, model.sigma_diag, X_all, w_val, w_jac, w_hess)
    return out


def barrier_recovery(state: TrainState, last_feasible: TrainState) -> TrainState:
    """Back off to the last certified-PD iterate and shrink the task step.

    The log-det barrier has no value off the PD cone, so a step that leaves
    it cannot be scored; revert, halve the learning rate, and give up after
    MAX_REVERTS consecutive reverts.
    """
    state.params = last_feasible.params.copy()
    state.lambda_logs = tuple(l.copy() for l in last_feasible.lambda_logs)
    state.lr_theta = state.lr_theta * 0.5
    state.revert_count += 1
    if state.revert_count >= MAX_REVERTS:
        state.aborted = True
        state.history.append({"epoch": state.epoch, "event": "abort",
                              "reason": f"{MAX_REVERTS} consecutive barrier reverts"})
    return state


def _pretrain_params(model: SystemModel, config: TrainConfig,
                     data: ScenarioData, params: NetParams) -> NetParams:
    """Uncertified warm start on the task hinges at a fixed provisional psi.

    Runs the full scenario loss (value hinges plus the derivative hinge at
    the filtered, input-clamped control) with psi frozen at -pretrain_margin,
    plus two regularizers: a weight-norm penalty
    rho * sum_j |theta1_j| (r_j + r_j^2 / 4), r_j = ||theta0_j||, which
    tracks the certified Lipschitz bounds of the value and jacobian levels,
    and a floor clamp that keeps the unsafe-side plateau close to the
    decision band (otherwise the fit overshoots far negative and the
    level-set slope, hence the noise gain of the filtered closed loop,
    grows several-fold). No certificates are enforced; the caller repairs
    Lambda afterwards.
    """
    rho, mt = config.pretrain_rho, config.pretrain_margin
    delta = config.budget.delta
    nS, nU, nD = len(data.S), len(data.U), len(data.D)
    if nS == 0 or nU == 0 or config.pretrain_steps == 0:
        return params
    rng = np.random.default_rng(config.seed + 1)
    bS, bU = min(nS, 2048), min(nU, 2048)
    bD = min(nD, 2048)
    floor = mt + delta + config.pretrain_floor_slack * mt
    psi_pre = -mt
    controller = MarginQPController(gamma=config.gamma, margin=mt)
    bounded_model = None
    if config.pretrain_u_clip is not None:
        cap = config.pretrain_u_clip
        bounded_model = replace(
            model, input_box=Box([-cap] * model.m, [cap] * model.m))
    empty = np.zeros((0, model.n))
    adam = Adam(1e-2)
    for _ in range(config.pretrain_steps):
        batch = ScenarioData(
            S=data.S[rng.integers(0, nS, bS)],
            U=data.U[rng.integers(0, nU, bU)],
            D=data.D[rng.integers(0, nD, bD)] if nD else np.zeros((0, model.n)),
        )
        sl = scenario_losses(params, psi_pre, batch, controller, model,
                             config.budget, config.gamma,
                             config.lambda1, config.lambda2)
        g = dict(sl["grad_theta"])
        if bounded_model is not None and len(batch.D):
            hD_band = h_batch(params, batch.D)
            # only the level-set neighborhood outside the unsafe set: inside
            # it the bounded-input hinge would push h upward against the
            # unsafe-side separation
            keep = (hD_band > -mt) & ~model.in_unsafe(batch.D)
            band = batch.D[keep]
            if len(band):
                slb = scenario_losses(params, psi_pre,
                                      ScenarioData(S=empty, U=empty, D=band),
                                      controller, bounded_model,
                                      config.budget, config.gamma,
                                      config.lambda1, config.lambda2)
                for k in g:
                    g[k] = g[k] + slb["grad_theta"][k]
        if len(batch.D):
            hD = h_batch(params, batch.D)
            w_floor = np.where(-hD - floor > 0.0, -1.0 / len(batch.D), 0.0)
            gf = batch_weighted_param_gradients(
                params, model.sigma_diag, batch.D, w_floor,
                np.zeros((len(batch.D), model.n)), np.zeros(len(batch.D)))
            for k in g:
                g[k] = g[k] + gf[k]
        t0, t1 = params.theta0, params.theta1
        r = np.linalg.norm(t0, axis=1) + 1e-12
        g["theta1"] = g["theta1"] + rho * np.sign(t1) * (r + r * r / 4.0)
        g["theta0"] = g["theta0"] + rho * (np.abs(t1) * (1.0 / r + 0.5))[:, None] * t0
        new = adam.step({"theta0": t0, "b0": params.b0,
                         "theta1": t1, "b1": params.b1}, g)
        params = NetParams(theta0=new["theta0"], b0=new["b0"],
                           theta1=new["theta1"], b1=float(new["b1"]))
    return params


def _init_state(model: SystemModel, config: TrainConfig,
                rng: np.random.Generator,
                data: Optional[ScenarioData] = None) -> TrainState:
    n, p = model.n, config.hidden
    theta0 = rng.uniform(-1.0, 1.0, size=(p, n)) / np.sqrt(n)
    theta1 = rng.uniform(-1.0, 1.0, size=p) / np.sqrt(p)
    params = NetParams(theta0=theta0, b0=np.zeros(p), theta1=theta1, b1=0.0)
    logs = tuple(np.zeros(p) for _ in range(3))
    if config.pretrain_steps > 0 and data is not None:
        fitted = _pretrain_params(model, config, data, params.copy())
        fitted_logs, ok = lambda_repair(fitted, model.sigma_diag,
                                        config.budget, logs, iters=500)
        if ok:
            return TrainState(params=fitted, psi=0.0, lambda_logs=fitted_logs,
                              lr_theta=config.lr_theta)
        # pretrained net does not fit the budget; fall back to random init
    state = TrainState(params=params, psi=0.0, lambda_logs=logs,
                       lr_theta=config.lr_theta)
    # scale into the PD cone: shrink weights and Lambda until all certificates pass
    for _ in range(200):
        report = certify(params, model.sigma_diag, config.budget, state.lambdas())
        if report.all_pass:
            return state
        params.theta0 *= 0.7
        params.theta1 *= 0.7
        state.lambda_logs = tuple(l - 0.3 for l in state.lambda_logs)
    raise Infeasible("could not scale the initial network into the PD cone")


def _batch_slices(n_items: int, n_batches: int, perm: np.ndarray):
    """Split a permutation into n_batches contiguous, near-equal slices."""
    if n_items == 0:
        return [np.zeros(0, dtype=np.int64)] * n_batches
    bounds = np.linspace(0, n_items, n_batches + 1).astype(np.int64)
    return [perm[bounds[i]:bounds[i + 1]] for i in range(n_batches)]


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "L1", "L2", "L3", "L_M", "L_v", "psi"])
        for row in history:
            if "event" in row:
                continue
            w.writerow([row["epoch"], row["L1"], row["L2"], row["L3"],
                        row["L_M"] if row["L_M"] is not None else "Infeasible",
                        row["L_v"], row["psi"]])


def _save_snapshot(state: TrainState, config: TrainConfig, model: SystemModel,
                   tag: str) -> None:
    if config.out_dir is None:
        return
    import os
    os.makedirs(config.out_dir, exist_ok=True)
    base = os.path.join(config.out_dir, f"checkpoint-{tag}")
    save_checkpoint(base + ".json", state.params, model.sigma_diag)
    sidecar = {"psi": state.psi,
               "lambda_logs": [l.tolist() for l in state.lambda_logs],
               "epoch": state.epoch, "config_hash": config.hash()}
    with open(base + ".meta.json", "w") as fh:
        json.dump(sidecar, fh, indent=1)


def train(model: SystemModel, data: ScenarioData, config: TrainConfig):
    """Mini-batch training loop; returns (TrainState, converged).

    Convergence: the full-data hinge loss is at most loss_theta_tol, all
    three certificate matrices are PD, and the validity hinge is zero at the
    re-synchronized (exact) psi. Non-convergence is reported, never raised.
    """
    rng = np.random.default_rng(config.seed)
    state = _init_state(model, config, rng, data)
    budget = config.budget
    coeffs = (config.c_l1, config.c_l2, config.c_l3)

    adam_theta = Adam(config.lr_theta)
    adam_lam = Adam(config.lr_lambda)
    adam_psi = Adam(config.lr_psi)

    last_feasible = state.snapshot()
    converged = False
    nD = len(data.D)
    n_batches = max(1, int(np.ceil(nD / config.batch_size)))

    for epoch in range(config.max_epochs):
        state.epoch = epoch
        permS = rng.permutation(len(data.S))
        permU = rng.permutation(len(data.U))
        permD = rng.permutation(nD)
        slS = _batch_slices(len(data.S), n_batches, permS)
        slU = _batch_slices(len(data.U), n_batches, permU)
        slD = _batch_slices(nD, n_batches, permD)

        for b in range(n_batches):
            batch = ScenarioData(S=data.S[slS[b]], U=data.U[slU[b]],
                                 D=data.D[slD[b]])
            if len(batch.D) == 0 and len(batch.S) == 0 and len(batch.U) == 0:
                continue
            # filter margin tracks psi batch by batch, so filter-active
            # points sit exactly at the hinge kink instead of above it
            controller = MarginQPController(gamma=config.gamma,
                                            margin=max(0.0, -state.psi))
            sl = scenario_losses(state.params, state.psi, batch, controller,
                                 model, budget, config.gamma,
                                 config.lambda1, config.lambda2)
            try:
                _, bg = barrier_loss_and_grad(state.params, model.sigma_diag,
                                              budget, state.lambdas(), coeffs)
            except Infeasible:
                state = barrier_recovery(state, last_feasible)
                adam_theta.reset()
                adam_lam.reset()
                if state.aborted:
                    break
                continue

            # one Adam step on theta with the combined task + barrier gradient
            g = dict(sl["grad_theta"])
            task_active = any(float(np.max(np.abs(v))) > 0.0 for v in g.values())
            g["theta0"] = g["theta0"] + bg["theta0"]
            g["theta1"] = g["theta1"] + bg["theta1"]
            vals = {"theta0": state.params.theta0, "b0": state.params.b0,
                    "theta1": state.params.theta1, "b1": state.params.b1}
            if task_active:
                adam_theta.lr = state.lr_theta
                new = adam_theta.step(vals, g)
            else:
                # barrier-only steps stay un-normalized: Adam would inflate
                # the small regularizer into full-size steps and drift the
                # net toward the cone's analytic center
                new = {k: vals[k] - state.lr_theta * g[k] for k in vals}
            cand = NetParams(theta0=new["theta0"], b0=new["b0"],
                             theta1=new["theta1"], b1=float(new["b1"]))
            # chain rule through Lambda = diag(exp(log))
            lam_grads = {f"l{i}": bg["lambdas"][i] * np.exp(state.lambda_logs[i])
                         for i in range(3)}
            lam_vals = {f"l{i}": state.lambda_logs[i] for i in range(3)}
            new_logs = adam_lam.step(lam_vals, lam_grads)
            cand_logs = tuple(new_logs[f"l{i}"] for i in range(3))

            report = certify(cand, model.sigma_diag, budget,
                             tuple(np.exp(l) for l in cand_logs))
            if not report.all_pass:
                # the matrices are affine in Lambda: usually the scalings just
                # lag the weight update and can be repaired without reverting
                cand_logs, repaired = lambda_repair(cand, model.sigma_diag,
                                                    budget, cand_logs)
                if repaired:
                    report = certify(cand, model.sigma_diag, budget,
                                     tuple(np.exp(l) for l in cand_logs))
                if not report.all_pass:
                    state = barrier_recovery(state, last_feasible)
                    adam_theta.reset()
                    adam_lam.reset()
                    if state.aborted:
                        break
                    continue
            state.params = cand
            state.lambda_logs = cand_logs
            state.revert_count = 0
            # heal the recovery halving gradually while steps stay feasible
            state.lr_theta = min(config.lr_theta, state.lr_theta * 1.15)
            last_feasible = state.snapshot()

            # psi step: scenario activity fractions plus the validity hinge
            vl = validity_loss(state.psi, budget)
            new_psi = adam_psi.step({"psi": state.psi},
                                    {"psi": sl["dpsi"] + config.v_weight * vl["dpsi"]})
            state.psi = float(new_psi["psi"])

        if state.aborted:
            break

        # epoch-end re-sync against the exact SOP optimum: history, validity
        # and convergence use psi*; the learned psi only tightens downward
        # (a hard sync parks every hinge at its kink and stalls the descent)
        controller = MarginQPController(gamma=config.gamma,
                                        margin=max(0.0, -state.psi))
        sop = solve_sop(state.params, model, data, controller, budget,
                        config.gamma)
        state.psi_star = sop.psi_star

        full = scenario_losses(state.params, state.psi, data, controller,
                               model, budget, config.gamma,
                               config.lambda1, config.lambda2,
                               with_grads=False)
        try:
            L_M, _ = barrier_loss_and_grad(state.params, model.sigma_diag,
                                           budget, state.lambdas(), coeffs)
        except Infeasible:
            L_M = None
        vl = validity_loss(state.psi_star, budget)
        report = certify(state.params, model.sigma_diag, budget, state.lambdas())
        assert report.all_pass, "accepted optimizer state lost certificate PD"
        state.history.append({"epoch": epoch, "L1": full["L1"], "L2": full["L2"],
                              "L3": full["L3"], "L_M": L_M, "L_v": vl["Lv"],
                              "psi": state.psi_star})
        state.psi = min(state.psi, state.psi_star)

        if (config.checkpoint_every and config.out_dir is not None
                and (epoch + 1) % config.checkpoint_every == 0):
            _save_snapshot(state, config, model, f"epoch{epoch + 1}")

        if (full["L_theta"] <= config.loss_theta_tol and report.all_pass
                and vl["Lv"] <= config.v_tol):
            converged = True
            state.epoch = epoch + 1
            # final iterate reports the exact optimum as its psi
            state.psi = state.psi_star
            break

    if config.out_dir is not None:
        _save_snapshot(state, config, model, "final")
        import os
        write_history(os.path.join(config.out_dir, "history.csv"), state.history)
    return state, converged
