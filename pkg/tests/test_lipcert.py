import numpy as np
import pytest

from sncbf.diffnet import NetParams, effective_weights, forward
from sncbf.lipcert import (
    PHI3_SLOPE_MAX,
    Infeasible,
    LipschitzBudget,
    _analytic_lambda_logs,
    _cert_matrices,
    barrier_loss_and_grad,
    build_M_single_layer,
    certify,
    lambda_repair,
    slope_bounds,
)
from sncbf.diffnet import activation_chain

from conftest import random_params

SIGMA = np.array([0.1, 0.1])


def small_budget(**kw):
    base = dict(L_h=5.0, L_dh=5.0, L_d2h=5.0, L_x=1.0, eps_bar=0.01, delta=1e-3)
    base.update(kw)
    return LipschitzBudget(**base)


def test_slope_bounds_values():
    assert (slope_bounds("value").alpha, slope_bounds("value").beta) == (0.0, 1.0)
    assert (slope_bounds("jacobian").alpha, slope_bounds("jacobian").beta) == (0.0, 0.25)
    hb = slope_bounds("hessian_trace")
    assert hb.alpha == -PHI3_SLOPE_MAX and hb.beta == PHI3_SLOPE_MAX
    with pytest.raises(ValueError):
        slope_bounds("gradient")


def test_phi3_slope_max_is_extremum_of_third_derivative():
    # the activation's third derivative attains +-1/(6 sqrt 3) and no more
    z = np.linspace(-10, 10, 200001)
    _, _, _, phi3 = activation_chain(z)
    assert np.max(np.abs(phi3)) <= PHI3_SLOPE_MAX + 1e-12
    assert np.max(np.abs(phi3)) > PHI3_SLOPE_MAX - 1e-6


def test_budget_l_max():
    b = small_budget(L_h=1.0, L_dh=2.0, L_d2h=0.5, L_x=3.0)
    assert b.L_max == 1.0 + 2.0 * 3.0 + 0.5
    b2 = small_budget(L_max_override=2.4)
    assert b2.L_max == 2.4
    with pytest.raises(ValueError):
        small_budget(L_h=-1.0)
    with pytest.raises(ValueError):
        small_budget(L_max_override=0.0)


def test_build_m_exactly_symmetric(rng):
    t0 = rng.standard_normal((6, 2))
    out = rng.standard_normal((3, 6))
    lam = np.exp(rng.standard_normal(6))
    M = build_M_single_layer(t0, out, lam, 2.0, slope_bounds("hessian_trace"))
    assert M.shape == (2 + 6 + 3, 2 + 6 + 3)
    assert np.array_equal(M, M.T)


def test_build_m_rejects_bad_lambda(rng):
    t0 = rng.standard_normal((4, 2))
    out = rng.standard_normal(4)
    with pytest.raises(ValueError):
        build_M_single_layer(t0, out, np.array([1.0, -1.0, 1.0, 1.0]), 1.0,
                             slope_bounds("value"))


def empirical_lipschitz(fn, rng, n, n_pairs=4000, radius=2.0):
    X = rng.uniform(-radius, radius, size=(n_pairs, n))
    Y = rng.uniform(-radius, radius, size=(n_pairs, n))
    best = 0.0
    for x, y in zip(X, Y):
        d = np.linalg.norm(x - y)
        if d < 1e-9:
            continue
        best = max(best, np.linalg.norm(np.atleast_1d(fn(x) - fn(y))) / d)
    return best


def certified_net(rng, budget):
    params = random_params(rng, p=6, n=2, scale=0.4)
    logs = tuple(np.zeros(6) for _ in range(3))
    logs, ok = lambda_repair(params, SIGMA, budget, logs, iters=500)
    assert ok, "fixture net must certify at the generous budget"
    return params, logs


def test_certify_report_shape_and_soundness(rng):
    budget = small_budget()
    params, logs = certified_net(rng, budget)
    report = certify(params, SIGMA, budget, tuple(np.exp(l) for l in logs))
    assert report.all_pass
    d = report.to_json_dict()
    assert set(d) == {"h", "dh", "d2h"}
    for entry in d.values():
        assert entry["pd"] and entry["min_pivot"] > 0 and entry["log_det"] is not None

    # a passing certificate is an upper bound on the true Lipschitz constants
    emp_h = empirical_lipschitz(lambda x: forward(params, x, SIGMA).value, rng, 2)
    emp_dh = empirical_lipschitz(lambda x: forward(params, x, SIGMA).jac, rng, 2)
    emp_d2h = empirical_lipschitz(lambda x: forward(params, x, SIGMA).hess_trace, rng, 2)
    assert emp_h <= budget.L_h
    assert emp_dh <= budget.L_dh
    assert emp_d2h <= budget.L_d2h


def test_certify_fails_below_true_lipschitz(rng):
    # shrinking L_h below an empirical difference quotient must break PD
    params = random_params(rng, p=6, n=2, scale=0.5)
    emp_h = empirical_lipschitz(lambda x: forward(params, x, SIGMA).value, rng, 2)
    budget = small_budget(L_h=max(emp_h * 0.5, 1e-6))
    logs = tuple(np.zeros(6) for _ in range(3))
    logs, ok = lambda_repair(params, SIGMA, budget, logs, iters=300)
    if ok:
        report = certify(params, SIGMA, budget, tuple(np.exp(l) for l in logs))
        assert not report.entries["h"].pd_pass


def test_analytic_lambda_sits_on_pd_boundary(rng):
    # For the symmetric slope interval the closed-form Lambda makes the
    # coupling Schur complement exactly semidefinite once L exceeds
    # beta * sum_j |w_j| ||theta0_j||, so the matrix is feasible up to
    # rounding and a strict interior point exists arbitrarily close by.
    beta = PHI3_SLOPE_MAX
    for _ in range(10):
        t0 = rng.standard_normal((8, 3))
        w = rng.standard_normal(8)
        bound = beta * float(np.sum(np.abs(w) * np.linalg.norm(t0, axis=1)))
        lam = np.exp(_analytic_lambda_logs(t0, w))
        M = build_M_single_layer(t0, w, lam, 1.05 * bound,
                                 slope_bounds("hessian_trace"))
        assert np.linalg.eigvalsh(M)[0] > -1e-10


def test_lambda_repair_certifies_tight_hessian_budget(rng):
    # a hessian-trace budget a few percent above the product bound is
    # reachable from the analytic candidate; plain ascent from unit Lambda
    # stalls far from it (this is the regime the closed form exists for)
    params = random_params(rng, p=10, n=2, scale=0.8)
    ssq = SIGMA ** 2
    theta_bar1 = params.theta1 * ((params.theta0 ** 2) @ ssq)
    bound = PHI3_SLOPE_MAX * float(
        np.sum(np.abs(theta_bar1) * np.linalg.norm(params.theta0, axis=1)))
    budget = small_budget(L_h=50.0, L_dh=50.0, L_d2h=1.05 * bound)
    logs0 = tuple(np.zeros(10) for _ in range(3))
    logs, ok = lambda_repair(params, SIGMA, budget, logs0, iters=500)
    assert ok
    report = certify(params, SIGMA, budget, tuple(np.exp(l) for l in logs))
    assert report.all_pass


def test_lambda_repair_from_zero_logs(rng):
    params = random_params(rng, p=10, n=2, scale=1.0)
    budget = small_budget(L_h=50.0, L_dh=50.0, L_d2h=50.0)
    logs0 = tuple(np.zeros(10) for _ in range(3))
    logs, ok = lambda_repair(params, SIGMA, budget, logs0, iters=500)
    assert ok
    report = certify(params, SIGMA, budget, tuple(np.exp(l) for l in logs))
    assert report.all_pass


def test_lambda_repair_reports_failure(rng):
    params = random_params(rng, p=6, n=2, scale=1.0)
    budget = small_budget(L_h=1e-9, L_dh=1e-9, L_d2h=1e-9)
    logs0 = tuple(np.zeros(6) for _ in range(3))
    _, ok = lambda_repair(params, SIGMA, budget, logs0, iters=20)
    assert not ok


def test_barrier_gradients_against_fd(rng):
    budget = small_budget()
    params, logs = certified_net(rng, budget)
    lambdas = tuple(np.exp(l) for l in logs)
    coeffs = (1e-3, 2e-3, 5e-4)
    loss, grads = barrier_loss_and_grad(params, SIGMA, budget, lambdas, coeffs)

    def value(p, lams):
        return barrier_loss_and_grad(p, SIGMA, budget, lams, coeffs)[0]

    eps = 1e-6
    for j in range(3):
        for k in range(2):
            t0p = params.theta0.copy()
            t0p[j, k] += eps
            t0m = params.theta0.copy()
            t0m[j, k] -= eps
            fd = (value(NetParams(t0p, params.b0, params.theta1, params.b1), lambdas)
                  - value(NetParams(t0m, params.b0, params.theta1, params.b1), lambdas)) / (2 * eps)
            assert abs(grads["theta0"][j, k] - fd) < 1e-4 * max(1.0, abs(fd))
        t1p = params.theta1.copy()
        t1p[j] += eps
        t1m = params.theta1.copy()
        t1m[j] -= eps
        fd = (value(NetParams(params.theta0, params.b0, t1p, params.b1), lambdas)
              - value(NetParams(params.theta0, params.b0, t1m, params.b1), lambdas)) / (2 * eps)
        assert abs(grads["theta1"][j] - fd) < 1e-4 * max(1.0, abs(fd))
    for i in range(3):
        for j in range(3):
            lp = [l.copy() for l in lambdas]
            lm = [l.copy() for l in lambdas]
            lp[i][j] += eps
            lm[i][j] -= eps
            fd = (value(params, tuple(lp)) - value(params, tuple(lm))) / (2 * eps)
            assert abs(grads["lambdas"][i][j] - fd) < 1e-4 * max(1.0, abs(fd))


def test_barrier_raises_outside_cone(rng):
    params = random_params(rng, p=6, n=2, scale=2.0)
    budget = small_budget(L_h=1e-9, L_dh=1e-9, L_d2h=1e-9)
    lambdas = tuple(np.ones(6) for _ in range(3))
    with pytest.raises(Infeasible):
        barrier_loss_and_grad(params, SIGMA, budget, lambdas, (1e-3, 1e-3, 1e-3))


def test_cert_matrices_use_effective_weights(rng):
    params = random_params(rng, p=5, n=2, scale=0.5)
    eff = effective_weights(params, SIGMA)
    lams = tuple(np.ones(5) for _ in range(3))
    budget = small_budget()
    M1, M2, M3 = _cert_matrices(params, SIGMA, budget, lams)
    assert M1.shape == (2 + 5 + 1, 2 + 5 + 1)
    assert M2.shape == (2 + 5 + 2, 2 + 5 + 2)
    assert M3.shape == (2 + 5 + 1, 2 + 5 + 1)
    M2_direct = build_M_single_layer(params.theta0, eff.theta_hat1, lams[1],
                                     budget.L_dh, slope_bounds("jacobian"))
    np.testing.assert_array_equal(M2, M2_direct)
