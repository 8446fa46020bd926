import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_cbf.barrier import BarrierEval
from robust_cbf.qp import (
    FilterFamily,
    RobustnessParams,
    constraint_terms,
    robust_margin,
    solve_filter,
    solve_filter_batch,
)
from robust_cbf.world import InputBox

from conftest import kkt_residual, random_instance

BOX = InputBox()


def make_eval(h=1.0, row=(1.0, 0.0), dh_dt=0.0, L_f=0.0):
    return BarrierEval(h=h, dh_dx=0.0, dh_dy=0.0, dh_dtheta=row[1], dh_dt=dh_dt,
                       L_gv=row[0], L_gw=row[1], L_f=L_f)


def test_constraint_terms_examples():
    row, rhs = constraint_terms(make_eval(), RobustnessParams(0, 0), 3.0)
    np.testing.assert_array_equal(row, [1.0, 0.0])
    assert rhs == pytest.approx(-3.0)
    _, rhs = constraint_terms(make_eval(row=(0.6, 0.8)), RobustnessParams(1.4, 0.3), 3.0)
    assert rhs == pytest.approx(-1.51)


def test_zero_row_feasibility_is_input_independent():
    row, rhs = constraint_terms(make_eval(h=1.0, row=(0.0, 0.0), dh_dt=0.5), RobustnessParams(1, 1), 3.0)
    assert rhs == pytest.approx(-3.5)
    for k in ([0, 0], [5, -5], [-1, 1]):
        r = solve_filter(np.array(k, float), row, rhs, BOX)
        assert r.feasible and not r.active
    r = solve_filter(np.zeros(2), row, 1.0, BOX)
    assert not r.feasible


def test_robustness_params_validation():
    with pytest.raises(ValueError):
        RobustnessParams(-0.1, 0.0)
    with pytest.raises(ValueError):
        RobustnessParams(0.0, np.inf)


def test_inactive_filter_returns_nominal():
    r = solve_filter(np.array([0.5, -0.3]), np.array([1.0, 1.0]), -5.0, BOX)
    np.testing.assert_array_equal(r.u, [0.5, -0.3])
    assert not r.active and r.feasible


def test_axis_aligned_projection():
    r = solve_filter(np.zeros(2), np.array([1.0, 0.0]), 1.0, BOX)
    np.testing.assert_allclose(r.u, [1.0, 0.0])
    assert r.active and r.feasible
    assert r.constraint_residual == pytest.approx(0.0, abs=1e-12)


def test_projection_clamped_to_box_edge():
    # foot of the perpendicular lies outside the box; optimum slides to the corner region
    r = solve_filter(np.array([0.0, 3.0]), np.array([1.0, 1.0]), 3.5, BOX)
    np.testing.assert_allclose(r.u, [1.5, 2.0])


def test_infeasible_returns_best_vertex():
    r = solve_filter(np.zeros(2), np.array([1.0, -2.0]), 100.0, BOX)
    assert not r.feasible
    np.testing.assert_array_equal(r.u, [2.0, -2.0])


def grid_oracle(k, row, rhs, lo, hi, n=401):
    gx = np.linspace(lo[0], hi[0], n)
    gy = np.linspace(lo[1], hi[1], n)
    U = np.stack(np.meshgrid(gx, gy, indexing="ij"), -1).reshape(-1, 2)
    ok = U @ row >= rhs
    if not ok.any():
        return None
    return float(((U[ok] - k) ** 2).sum(1).min())


def check_instance(k, row, rhs, lo=BOX.lo, hi=BOX.hi):
    u, active, feasible = solve_filter_batch(k, row, rhs, lo, hi)
    assert np.all(u >= lo) and np.all(u <= hi)
    if feasible:
        assert row @ u - rhs >= -1e-8
        assert kkt_residual(u, k, row, rhs, lo, hi) < 1e-8
        best = grid_oracle(k, row, rhs, lo, hi)
        if best is not None:
            assert ((u - k) ** 2).sum() <= best + 1e-9
    else:
        assert row @ u == pytest.approx(max(row @ v for v in
                                            [[lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]]))
    return u, feasible


def test_random_instances_against_oracles(rng):
    for _ in range(300):
        check_instance(*random_instance(rng))


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-5, 5), st.floats(-5, 5), st.floats(-8, 8))
def test_hypothesis_instances(k0, k1, r0, r1, rhs):
    check_instance(np.array([k0, k1]), np.array([r0, r1]), rhs)


def test_monotone_in_gamma1(rng):
    for _ in range(50):
        k = rng.uniform(-3, 3, 2)
        row = rng.normal(size=2)
        ev = make_eval(h=rng.uniform(0.05, 1.0), row=tuple(row))
        prev = -np.inf
        for g1 in np.linspace(0, 4, 21):
            r, rhs = constraint_terms(ev, RobustnessParams(g1, 0.3), 3.0)
            u = solve_filter(k, r, rhs, BOX).u
            assert row @ u >= prev - 1e-12
            prev = row @ u


def test_zero_gamma_is_plain_cbf_qp(rng):
    for _ in range(200):
        k = rng.uniform(-3, 3, 2)
        row = rng.normal(size=2)
        ev = make_eval(h=rng.uniform(-0.5, 1), row=tuple(row), dh_dt=rng.normal())
        r, rhs = constraint_terms(ev, RobustnessParams(0.0, 0.0), 3.0)
        plain_rhs = -ev.L_f - ev.dh_dt - 3.0 * ev.h
        assert rhs == plain_rhs
        a = solve_filter(k, r, rhs, BOX).u
        b = solve_filter(k, row, plain_rhs, BOX).u
        assert np.array_equal(a, b)


def test_robust_margin():
    assert robust_margin(np.array([0.6, 0.8]), 1.4, 0.3) == pytest.approx(1.49)
    np.testing.assert_allclose(robust_margin(np.array([[3.0, 4.0], [0, 0]]), 1.0, 1.0), [30.0, 0.0])


def test_family_matches_batch(rng):
    m = 300
    k = rng.uniform(-3, 3, (m, 2))
    row = rng.normal(size=(m, 2))
    row[:20, 0] = 0.0
    row[20:40, 1] = 0.0
    row[40:45] = 0.0
    rhs = rng.normal(size=(40, m)) * 3
    fam = FilterFamily(k, row, BOX.lo, BOX.hi)
    ref, _, _ = solve_filter_batch(k[None], row[None], rhs, BOX.lo, BOX.hi)
    np.testing.assert_allclose(fam.solve(rhs), ref, atol=1e-12)


def test_batch_shapes():
    u, a, f = solve_filter_batch(np.zeros((5, 2)), np.array([1.0, 0.0]), np.linspace(-3, 3, 5), BOX.lo, BOX.hi)
    assert u.shape == (5, 2) and a.shape == (5,) and f.shape == (5,)
    np.testing.assert_allclose(u[:, 0], [0, 0, 0, 1.5, 2.0])
    assert list(f) == [True, True, True, True, False]
