"""Grid covers, scenario datasets, the SOP optimum and the validity verdict.

The sampled optimization problem is a plain max: psi* is the largest sampled
constraint value over the three families (safe-set sign, unsafe-set sign,
barrier derivative condition). The derivative condition is evaluated at the
input produced by the QP filter, which receives -psi as its constraint
margin as in the learning algorithm.

solve_sop and stream_verify share one chunked scan (fixed chunk size, fixed
merge order), so the streaming result is bitwise identical to the
materialized one for any worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import kernels
from .diffnet import NetParams, forward
from .lipcert import LipschitzBudget
from .systems import PolicyFailure, SystemModel

CHUNK = 8192
MAX_GRID_POINTS = 2 ** 53


class BudgetExceeded(Exception):
    pass


@dataclass
class CoverSpec:
    """Uniform axis-aligned grid cover of a box.

    Cells are hyper-rectangles of half-width steps/2 per dimension centered at
    grid points; every point of the box is within eps_actual (l2) of a center,
    and eps_actual <= eps_bar by construction.
    """

    lo: np.ndarray
    hi: np.ndarray
    counts: np.ndarray
    eps_bar: float

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).ravel()
        self.hi = np.asarray(self.hi, dtype=np.float64).ravel()
        self.counts = np.asarray(self.counts, dtype=np.int64).ravel()
        if np.any(self.counts < 1):
            raise ValueError("grid counts must be >= 1")

    @property
    def n(self) -> int:
        return len(self.counts)

    @property
    def steps(self) -> np.ndarray:
        return (self.hi - self.lo) / self.counts

    @property
    def half_widths(self) -> np.ndarray:
        return 0.5 * self.steps

    @property
    def eps_actual(self) -> float:
        return float(np.linalg.norm(self.half_widths))

    @property
    def total(self) -> int:
        return int(np.prod(self.counts))

    def points(self, start: int, stop: int) -> np.ndarray:
        """Grid points for flat indices [start, stop) in C order (dim 0 slowest)."""
        idx = np.arange(start, stop, dtype=np.int64)
        coords = np.empty((len(idx), self.n))
        rem = idx
        radix = np.concatenate([np.cumprod(self.counts[::-1])[::-1][1:], [1]])
        steps = self.steps
        for d in range(self.n):
            q = rem // radix[d]
            rem = rem - q * radix[d]
            coords[:, d] = self.lo[d] + (q + 0.5) * steps[d]
        return coords


def make_cover_spec(lo, hi, eps_bar: float) -> CoverSpec:
    """Grid with per-dim half-width eps_bar/sqrt(n) (l2 radius exactly eps_bar)."""
    lo = np.asarray(lo, dtype=np.float64).ravel()
    hi = np.asarray(hi, dtype=np.float64).ravel()
    if eps_bar <= 0:
        raise ValueError("eps_bar must be positive")
    n = len(lo)
    hw = eps_bar / np.sqrt(n)
    counts = np.maximum(1, np.ceil((hi - lo) / (2.0 * hw) - 1e-12).astype(np.int64))
    spec = CoverSpec(lo=lo, hi=hi, counts=counts, eps_bar=eps_bar)
    if spec.total > MAX_GRID_POINTS:
        raise BudgetExceeded(f"grid of {spec.total} points exceeds addressable size")
    return spec


@dataclass
class ScenarioData:
    """Sample sets: S within the safe region, U within the unsafe region, D in X."""

    S: np.ndarray
    U: np.ndarray
    D: np.ndarray
    grid: Optional[CoverSpec] = None  # set when D is exactly the grid of `grid`

    def __post_init__(self):
        for name in ("S", "U", "D"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64))
            if arr.size and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite samples")
            setattr(self, name, arr)


def build_cover(model: SystemModel, eps_bar: float,
                budget_cap: Optional[int] = None):
    """Construct the cover of the state box and classify its grid points.

    Returns (fine_spec, data). When the full grid exceeds budget_cap the
    returned data comes from a coarser training grid (data.grid reflects it)
    while fine_spec keeps the requested resolution for streaming
    verification.
    """
    fine = make_cover_spec(model.state_box.lo, model.state_box.hi, eps_bar)
    spec = fine
    eps = eps_bar
    while budget_cap is not None and spec.total > budget_cap:
        eps *= max(1.05, (spec.total / budget_cap) ** (1.0 / spec.n))
        spec = make_cover_spec(model.state_box.lo, model.state_box.hi, eps)

    pts = []
    masks_s = []
    masks_u = []
    for start in range(0, spec.total, CHUNK):
        X = spec.points(start, min(start + CHUNK, spec.total))
        pts.append(X)
        masks_s.append(model.in_safe(X))
        masks_u.append(model.in_unsafe(X))
    D = np.vstack(pts)
    ms = np.concatenate(masks_s)
    mu = np.concatenate(masks_u)
    data = ScenarioData(S=D[ms], U=D[mu], D=D, grid=spec)
    return fine, data


@dataclass
class MarginQPController:
    """Marker for the vectorized zero-reference QP filter controller.

    margin is the slack the filter enforces on the barrier constraint;
    training and verification pass max(0, -psi).
    """

    gamma: float
    margin: float = 0.0


@dataclass
class SOPResult:
    psi_star: float
    argmax_x: Optional[np.ndarray]
    argmax_k: Optional[int]
    q1_max: float
    q2_max: float
    q3_max: float
    n_infeasible: int = 0

    def family_max(self, k: int) -> float:
        return (self.q1_max, self.q2_max, self.q3_max)[k - 1]


def eval_q(params: NetParams, model: SystemModel, sample, u,
           budget: LipschitzBudget, gamma: float):
    """q values at one sample with an explicit input u.

    Direct closed-form evaluation through diffnet.forward, independent of the
    batched kernel (serves as its oracle). q1/q2 are None off their sets.
    """
    x = np.asarray(sample, dtype=np.float64).ravel()
    u = np.asarray(u, dtype=np.float64).ravel()
    out = forward(params, x, model.sigma_diag)
    xdot = model.f(x) + model.g(x) @ u
    q3 = -float(out.jac @ xdot) - 0.5 * out.hess_trace - gamma * out.value
    q1 = -out.value if model.in_safe(x) else None
    q2 = out.value + budget.delta if model.in_unsafe(x) else None
    return {"q1": q1, "q2": q2, "q3": q3, "h": out.value}


@dataclass
class _Partial:
    best: list  # per family: (value, first_flat_index, x)
    n_infeasible: int = 0


def _scan_chunk(params, model, budget, gamma, controller, X, mask_s, mask_u,
                base_index, families=(True, True, True)) -> _Partial:
    ssq = model.sigma_diag ** 2
    FX = model.f_batch(X)
    GX = model.g_batch(X)
    if model.input_box is not None:
        u_lo, u_hi = model.input_box.lo, model.input_box.hi
    else:
        u_lo = np.full(model.m, -np.inf)
        u_hi = np.full(model.m, np.inf)
    q1, q2, q3, _, _, _, infeasible = kernels.q_batch(
        params.theta0, params.b0, params.theta1, params.b1, ssq,
        X, FX, GX,
        mask_s if families[0] else np.zeros(len(X), dtype=bool),
        mask_u if families[1] else np.zeros(len(X), dtype=bool),
        budget.delta, gamma, controller.margin, u_lo, u_hi)
    best = []
    for fam_on, q in zip(families, (q1, q2, q3)):
        if not fam_on or len(q) == 0:
            best.append((-np.inf, None, None))
            continue
        i = int(np.argmax(q))
        v = float(q[i])
        if np.isneginf(v):
            best.append((-np.inf, None, None))
        else:
            best.append((v, base_index + i, X[i].copy()))
    return _Partial(best=best, n_infeasible=int(np.sum(infeasible)))


def _merge(parts) -> SOPResult:
    best = [(-np.inf, None, None)] * 3
    n_inf = 0
    for part in parts:  # caller supplies canonical order
        n_inf += part.n_infeasible
        for k in range(3):
            v, i, x = part.best[k]
            bv, bi, _ = best[k]
            if v > bv or (v == bv and i is not None and (bi is None or i < bi)):
                best[k] = (v, i, x)
    fam_values = [b[0] for b in best]
    psi_star = max(fam_values)
    arg_k = None
    arg_x = None
    for k in range(3):
        if fam_values[k] == psi_star and best[k][1] is not None:
            arg_k = k + 1
            arg_x = best[k][2]
            break
    return SOPResult(psi_star=psi_star, argmax_x=arg_x, argmax_k=arg_k,
                     q1_max=fam_values[0], q2_max=fam_values[1],
                     q3_max=fam_values[2], n_infeasible=n_inf)


def solve_sop(params: NetParams, model: SystemModel, data: ScenarioData,
              controller: Union[MarginQPController, Callable],
              budget: LipschitzBudget, gamma: float) -> SOPResult:
    """max of the sampled q values (the SOP is a min over an upper bound).

    With a MarginQPController the scan is vectorized; any other callable is
    applied per sample (PolicyFailure propagates with the sample attached).
    """
    if len(data.D) == 0:
        raise ValueError("dataset is empty")
    if isinstance(controller, MarginQPController):
        parts = []
        if data.grid is not None:
            # S and U are subsets of the grid: one pass with membership masks
            for start in range(0, len(data.D), CHUNK):
                X = data.D[start:start + CHUNK]
                parts.append(_scan_chunk(params, model, budget, gamma, controller,
                                         X, model.in_safe(X), model.in_unsafe(X),
                                         start))
        else:
            zeros = lambda B: np.zeros(B, dtype=bool)
            ones = lambda B: np.ones(B, dtype=bool)
            for start in range(0, len(data.D), CHUNK):
                X = data.D[start:start + CHUNK]
                parts.append(_scan_chunk(params, model, budget, gamma, controller,
                                         X, zeros(len(X)), zeros(len(X)), start,
                                         families=(False, False, True)))
            for start in range(0, len(data.S), CHUNK):
                X = data.S[start:start + CHUNK]
                parts.append(_scan_chunk(params, model, budget, gamma, controller,
                                         X, ones(len(X)), zeros(len(X)), start,
                                         families=(True, False, False)))
            for start in range(0, len(data.U), CHUNK):
                X = data.U[start:start + CHUNK]
                parts.append(_scan_chunk(params, model, budget, gamma, controller,
                                         X, zeros(len(X)), ones(len(X)), start,
                                         families=(False, True, False)))
        return _merge(parts)

    # generic controller: per-sample evaluation, q3 over D, q1 over S, q2 over U
    best = [(-np.inf, None, None)] * 3
    for i, x in enumerate(data.D):
        u = controller(x)  # PolicyFailure propagates with the sample attached
        q = eval_q(params, model, x, u, budget, gamma)
        if q["q3"] > best[2][0]:
            best[2] = (q["q3"], i, np.asarray(x, dtype=np.float64))
    for i, x in enumerate(data.S):
        v = -float(forward(params, x, model.sigma_diag).value)
        if v > best[0][0]:
            best[0] = (v, i, np.asarray(x, dtype=np.float64))
    for i, x in enumerate(data.U):
        v = float(forward(params, x, model.sigma_diag).value) + budget.delta
        if v > best[1][0]:
            best[1] = (v, i, np.asarray(x, dtype=np.float64))
    return _merge([_Partial(best=best)])


def stream_verify(params: NetParams, model: SystemModel, fine: CoverSpec,
                  controller: MarginQPController, budget: LipschitzBudget,
                  gamma: float, workers: int = 1) -> SOPResult:
    """solve_sop over the fine grid without materializing it.

    Chunks of fixed size are scanned in parallel and merged in canonical grid
    order, so the result is independent of the worker count and identical to
    the materialized scan.
    """
    total = fine.total
    starts = list(range(0, total, CHUNK))

    def work(start):
        X = fine.points(start, min(start + CHUNK, total))
        return _scan_chunk(params, model, budget, gamma, controller,
                           X, model.in_safe(X), model.in_unsafe(X), start)

    if workers <= 1:
        parts = [work(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts))
    return _merge(parts)


def validity_check(psi_star: float, budget: LipschitzBudget):
    """Theorem-style validity verdict: margin = L_max * eps_bar + psi*."""
    margin = budget.L_max * budget.eps_bar + psi_star
    return {"valid": bool(margin <= 0.0), "margin": margin,
            "L_max": budget.L_max, "eps_bar": budget.eps_bar,
            "psi_star": psi_star}


def h_batch(params: NetParams, X: np.ndarray) -> np.ndarray:
    """Barrier values on a batch of states (plain vectorized forward pass)."""
    A = X @ params.theta0.T + params.b0
    phi = np.where(A > 30.0, A, 0.0) + np.log1p(np.exp(np.where(A > 30.0, -A, A)))
    return phi @ params.theta1 + params.b1


def safe_volume_fraction(params: NetParams, model: SystemModel,
                         samples: int = 100000, seed: int = 0):
    """Monte-Carlo fraction of the state box with h >= 0, with binomial 95% CI."""
    if samples < 1000:
        raise ValueError("need at least 1000 samples")
    rng = np.random.default_rng(seed)
    X = rng.uniform(model.state_box.lo, model.state_box.hi, size=(samples, model.n))
    frac = float(np.mean(h_batch(params, X) >= 0.0))
    ci95 = 1.96 * np.sqrt(max(frac * (1.0 - frac), 1e-12) / samples)
    return {"fraction": frac, "ci95": ci95, "samples": samples}
