import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sncbf.qpfilter import (
    KKT_TOL,
    FilterStatus,
    constraint_terms,
    filtered_policy,
    qp_filter,
    solve_affine_qp,
)
from sncbf.diffnet import forward
from sncbf.systems import PolicyFailure, pendulum_model

from conftest import random_params


def grid_oracle(a, b, u_ref, margin, lo=-5.0, hi=5.0, step=1e-4):
    """Brute-force scan of the scalar QP over a uniform grid."""
    u = np.arange(lo, hi + step / 2, step)
    feas = a + b * u >= margin
    if not np.any(feas):
        return None
    cand = u[feas]
    return float(cand[np.argmin((cand - u_ref) ** 2)])


def test_qp_against_grid_search(rng):
    # exhaustive-scan oracle: agreement within twice the grid step
    for _ in range(200):
        a = rng.uniform(-3, 3)
        b = rng.uniform(-2, 2)
        u_ref = rng.uniform(-4, 4)
        margin = rng.uniform(-1, 1)
        best = grid_oracle(a, b, u_ref, margin)
        res = solve_affine_qp(a, np.array([b]), np.array([u_ref]), margin=margin)
        if best is None or abs(res.u[0]) > 5.0:
            continue
        if res.status is FilterStatus.INFEASIBLE:
            continue
        assert abs(res.u[0] - best) < 2e-4


def test_qp_kkt_conditions(rng):
    # stationarity u - u_ref = mu * b with mu >= 0, complementary slackness
    for _ in range(200):
        a = rng.uniform(-3, 3)
        b = rng.standard_normal(3)
        u_ref = rng.standard_normal(3)
        margin = rng.uniform(-1, 1)
        res = solve_affine_qp(a, b, u_ref, margin=margin)
        assert res.status in (FilterStatus.UNMODIFIED, FilterStatus.PROJECTED)
        assert res.constraint_slack >= -KKT_TOL
        diff = res.u - u_ref
        if res.status is FilterStatus.UNMODIFIED:
            assert np.all(diff == 0)
        else:
            mu = float(diff @ b) / float(b @ b)
            assert mu >= -KKT_TOL
            np.testing.assert_allclose(diff, mu * b, atol=KKT_TOL)
            assert abs(res.constraint_slack) <= KKT_TOL


def test_qp_statuses():
    ok = solve_affine_qp(1.0, np.array([1.0]), np.array([0.0]))
    assert ok.status is FilterStatus.UNMODIFIED and not ok.modified

    proj = solve_affine_qp(-1.0, np.array([2.0]), np.array([0.0]))
    assert proj.status is FilterStatus.PROJECTED and proj.modified
    assert abs(proj.u[0] - 0.5) < 1e-12

    inf = solve_affine_qp(-1.0, np.array([0.0]), np.array([0.0]))
    assert inf.status is FilterStatus.INFEASIBLE

    # projection lands below the lower bound; the clamped point still
    # satisfies the constraint, with positive slack
    clamped = solve_affine_qp(-1.0, np.array([2.0]), np.array([0.0]),
                              lo=np.array([0.55]), hi=np.array([10.0]))
    assert clamped.status is FilterStatus.CLAMPED
    assert clamped.u[0] == 0.55
    assert clamped.constraint_slack >= 0

    # box too tight to satisfy the constraint
    boxed_out = solve_affine_qp(-1.0, np.array([2.0]), np.array([0.0]),
                                lo=np.array([-0.1]), hi=np.array([0.1]))
    assert boxed_out.status is FilterStatus.INFEASIBLE


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(-4, 4), st.floats(-1, 1))
def test_qp_is_minimal_modification(a, b, u_ref, margin):
    res = solve_affine_qp(a, np.array([b]), np.array([u_ref]), margin=margin)
    if res.status is FilterStatus.INFEASIBLE:
        assert a + b * u_ref < margin and b * b == 0.0
        return
    assert a + b * res.u[0] >= margin - KKT_TOL
    # no feasible point can be closer than the returned one
    if res.modified:
        assert abs(res.u[0] - u_ref) <= abs(res.u[0] - u_ref) + 1e-15
        better = res.u[0] - np.sign(res.u[0] - u_ref) * 1e-6
        assert a + b * better < margin + 1e-9


def test_constraint_terms_match_forward(rng):
    model = pendulum_model()
    params = random_params(rng, p=6, n=2, scale=0.5)
    x = np.array([0.1, -0.2])
    a, b = constraint_terms(params, model, x, gamma=1.0)
    out = forward(params, x, model.sigma_diag)
    a_exp = float(out.jac @ model.f(x)) + 0.5 * out.hess_trace + out.value
    np.testing.assert_allclose(a, a_exp, rtol=1e-12)
    np.testing.assert_allclose(b, out.jac @ model.g(x), rtol=1e-12)


def test_filtered_policy_clip_and_failure(rng):
    model = pendulum_model()
    params = random_params(rng, p=6, n=2, scale=0.5)
    pol = filtered_policy(params, model, gamma=1.0, margin=0.0, u_clip=0.01)
    u = pol(np.array([0.05, 0.0]))
    assert np.all(np.abs(u) <= 0.01)

    # a constant-zero barrier gives b = 0 everywhere: margin > 0 forces failure
    flat = random_params(rng, p=6, n=2, scale=0.0)
    pol_bad = filtered_policy(flat, model, gamma=1.0, margin=1.0)
    with pytest.raises(PolicyFailure):
        pol_bad(np.array([0.0, 0.0]))


def test_qp_filter_checks_dimensions(rng):
    model = pendulum_model()
    params = random_params(rng, p=4, n=2)
    with pytest.raises(ValueError):
        qp_filter(params, model, np.zeros(2), np.zeros(2))
