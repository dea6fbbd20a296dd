import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sncbf.lipcert import LipschitzBudget
from sncbf.qpfilter import solve_affine_qp, constraint_terms
from sncbf.scenario import (
    CHUNK,
    BudgetExceeded,
    CoverSpec,
    MarginQPController,
    ScenarioData,
    build_cover,
    eval_q,
    h_batch,
    make_cover_spec,
    safe_volume_fraction,
    solve_sop,
    stream_verify,
    validity_check,
)
from sncbf.diffnet import forward
from sncbf.systems import pendulum_model

from conftest import random_params

BUDGET = LipschitzBudget(L_h=1.0, L_dh=1.0, L_d2h=1.0, L_x=1.0,
                         eps_bar=0.05, delta=1e-3)


def test_cover_spec_radius_and_counts():
    spec = make_cover_spec([-1.0, -2.0], [1.0, 2.0], 0.1)
    assert spec.eps_actual <= 0.1 + 1e-12
    # per-dim half width is at most eps/sqrt(n) (counts round up)
    hw = 0.1 / np.sqrt(2)
    assert np.all(spec.half_widths <= hw + 1e-12)
    assert spec.total == int(np.prod(spec.counts))


def test_cover_points_cover_the_box(rng):
    spec = make_cover_spec([-1.0, 0.0], [1.0, 3.0], 0.2)
    pts = spec.points(0, spec.total)
    samples = rng.uniform([-1.0, 0.0], [1.0, 3.0], size=(2000, 2))
    d = np.sqrt(((samples[:, None, :] - pts[None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert np.all(d <= 0.2 + 1e-12)


def test_cover_points_chunked_enumeration():
    spec = make_cover_spec([0.0, 0.0], [1.0, 1.0], 0.3)
    whole = spec.points(0, spec.total)
    parts = np.vstack([spec.points(i, min(i + 3, spec.total))
                       for i in range(0, spec.total, 3)])
    np.testing.assert_array_equal(whole, parts)


def test_cover_spec_validation():
    with pytest.raises(ValueError):
        make_cover_spec([0.0], [1.0], 0.0)
    with pytest.raises(ValueError):
        CoverSpec(lo=[0.0], hi=[1.0], counts=[0], eps_bar=0.1)
    with pytest.raises(BudgetExceeded):
        make_cover_spec([0.0] * 8, [1.0] * 8, 1e-8)


def test_build_cover_masks():
    model = pendulum_model()
    fine, data = build_cover(model, 0.05)
    assert fine.total == len(data.D)
    assert np.all(model.in_safe(data.S))
    assert np.all(model.in_unsafe(data.U))
    assert data.grid is fine or data.grid.total == fine.total


def test_build_cover_budget_cap_coarsens():
    model = pendulum_model()
    fine, data = build_cover(model, 0.01, budget_cap=2000)
    assert len(data.D) <= 2000
    assert fine.eps_bar == 0.01
    assert data.grid.eps_actual > fine.eps_actual


def naive_sop(params, model, data, margin, budget, gamma):
    """Two-pass reference: explicit per-sample QP, then max over hinge values."""
    best = -np.inf
    for x in data.D:
        a, b = constraint_terms(params, model, x, gamma)
        res = solve_affine_qp(a, b, np.zeros(model.m), margin=margin)
        q = eval_q(params, model, x, res.u, budget, gamma)
        best = max(best, q["q3"])
    for x in data.S:
        best = max(best, -forward(params, x, model.sigma_diag).value)
    for x in data.U:
        best = max(best, forward(params, x, model.sigma_diag).value + budget.delta)
    return best


def test_solve_sop_matches_naive_oracle(rng):
    model = pendulum_model()
    params = random_params(rng, p=8, n=2, scale=0.6)
    X = rng.uniform(model.state_box.lo, model.state_box.hi, size=(300, 2))
    data = ScenarioData(S=X[model.in_safe(X)], U=X[model.in_unsafe(X)], D=X)
    for margin in (0.0, 0.07):
        ctrl = MarginQPController(gamma=1.0, margin=margin)
        got = solve_sop(params, model, data, ctrl, BUDGET, 1.0)
        want = naive_sop(params, model, data, margin, BUDGET, 1.0)
        assert abs(got.psi_star - want) < 1e-10
        assert got.psi_star == max(got.q1_max, got.q2_max, got.q3_max)


def test_solve_sop_generic_controller_agrees(rng):
    model = pendulum_model()
    params = random_params(rng, p=6, n=2, scale=0.5)
    X = rng.uniform(model.state_box.lo, model.state_box.hi, size=(100, 2))
    data = ScenarioData(S=X[model.in_safe(X)], U=X[model.in_unsafe(X)], D=X)
    zero = lambda x: np.zeros(model.m)
    got = solve_sop(params, model, data, zero, BUDGET, 1.0)
    best = -np.inf
    for x in data.D:
        best = max(best, eval_q(params, model, x, np.zeros(1), BUDGET, 1.0)["q3"])
    for x in data.S:
        best = max(best, -forward(params, x, model.sigma_diag).value)
    for x in data.U:
        best = max(best, forward(params, x, model.sigma_diag).value + BUDGET.delta)
    assert abs(got.psi_star - best) < 1e-10


def test_solve_sop_rejects_empty():
    model = pendulum_model()
    data = ScenarioData(S=np.zeros((0, 2)), U=np.zeros((0, 2)), D=np.zeros((0, 2)))
    with pytest.raises(ValueError):
        solve_sop(random_params(np.random.default_rng(0)), model, data,
                  MarginQPController(gamma=1.0), BUDGET, 1.0)


def test_stream_verify_worker_invariance(rng):
    model = pendulum_model()
    params = random_params(rng, p=8, n=2, scale=0.5)
    fine = make_cover_spec(model.state_box.lo, model.state_box.hi, 0.03)
    ctrl = MarginQPController(gamma=1.0, margin=0.02)
    results = [stream_verify(params, model, fine, ctrl, BUDGET, 1.0, workers=w)
               for w in (1, 2, 4)]
    base = results[0]
    for r in results[1:]:
        assert r.psi_star == base.psi_star
        assert r.q1_max == base.q1_max
        assert r.q2_max == base.q2_max
        assert r.q3_max == base.q3_max
        assert r.argmax_k == base.argmax_k
        np.testing.assert_array_equal(r.argmax_x, base.argmax_x)


def test_stream_verify_equals_materialized(rng):
    model = pendulum_model()
    params = random_params(rng, p=8, n=2, scale=0.5)
    fine, data = build_cover(model, 0.05)
    ctrl = MarginQPController(gamma=1.0, margin=0.0)
    a = stream_verify(params, model, fine, ctrl, BUDGET, 1.0, workers=2)
    b = solve_sop(params, model, data, ctrl, BUDGET, 1.0)
    assert a.psi_star == b.psi_star
    np.testing.assert_array_equal(a.argmax_x, b.argmax_x)


def test_validity_check_arithmetic():
    b = LipschitzBudget(L_h=1, L_dh=1, L_d2h=1, L_x=1, eps_bar=0.01,
                        delta=1e-3, L_max_override=2.4)
    out = validity_check(-0.05, b)
    assert out["valid"] and abs(out["margin"] - (2.4 * 0.01 - 0.05)) < 1e-15
    out2 = validity_check(0.05, b)
    assert not out2["valid"]


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 10), st.floats(1e-4, 0.1), st.floats(-1, 1))
def test_validity_check_sign_property(L, eps, psi):
    b = LipschitzBudget(L_h=1, L_dh=1, L_d2h=1, L_x=1, eps_bar=eps,
                        delta=1e-3, L_max_override=L)
    out = validity_check(psi, b)
    assert out["valid"] == (L * eps + psi <= 0)


def test_h_batch_matches_forward(rng):
    model = pendulum_model()
    params = random_params(rng, p=9, n=2)
    X = rng.uniform(-1, 1, size=(40, 2))
    vals = h_batch(params, X)
    for i, x in enumerate(X):
        assert abs(vals[i] - forward(params, x, model.sigma_diag).value) < 1e-12


def test_safe_volume_fraction(rng):
    model = pendulum_model()
    params = random_params(rng, p=6, n=2)
    out = safe_volume_fraction(params, model, samples=20000, seed=7)
    again = safe_volume_fraction(params, model, samples=20000, seed=7)
    assert out == again
    assert 0.0 <= out["fraction"] <= 1.0
    assert out["ci95"] > 0
    with pytest.raises(ValueError):
        safe_volume_fraction(params, model, samples=10)


def test_scenario_data_rejects_nonfinite():
    with pytest.raises(ValueError):
        ScenarioData(S=np.array([[np.nan, 0.0]]), U=np.zeros((0, 2)),
                     D=np.zeros((1, 2)))
