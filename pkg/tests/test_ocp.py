import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfmpc.ocp import (
    Bounds,
    assemble_qp,
    barrier_cost,
    barrier_derivs,
    in_domain,
    interior_reference,
    keep_interior,
    objective,
    solve_perturbed_ocp,
    stage_cost_derivs,
    validate_bounds,
)

B3 = Bounds(np.array([0.0, -1.0, 0.0]), np.array([np.inf, np.inf, np.inf]), 1e-3)
BOX = Bounds(np.array([-1.0, 0.0]), np.array([1.0, 2.0]), 0.1)


def test_barrier_derivatives_match_finite_differences():
    u = np.array([0.3, 1.7])
    g, h = barrier_derivs(u, BOX)
    eps = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = eps
        gi = (barrier_cost(u + e, BOX) - barrier_cost(u - e, BOX)) / (2 * eps)
        hi = (barrier_derivs(u + e, BOX)[0][i] - barrier_derivs(u - e, BOX)[0][i]) / (2 * eps)
        assert abs(gi - g[i]) <= 1e-7
        assert abs(hi - h[i]) <= 1e-5


def test_barrier_ignores_infinite_bounds_and_is_inf_outside():
    assert barrier_cost(np.array([1.0, 0.0, 1.0]), B3) == pytest.approx(-1e-3 * (0.0 + np.log(1.0) + 0.0))
    assert barrier_cost(np.array([-0.1, 0.0, 1.0]), B3) == np.inf
    assert not in_domain(np.array([0.0, 0.0, 1.0]), B3)


def test_interior_reference_uses_scalar_barrier_minimizer():
    from selfmpc.config import reactor_scenario

    c = reactor_scenario().cost
    u = interior_reference(c, B3)
    np.testing.assert_allclose(u, [0.6, 0.0, np.sqrt(1e-3 / 100)])


@given(
    st.lists(st.floats(-0.99, 0.99), min_size=2, max_size=2),
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
)
def test_keep_interior_stays_in_domain(u_old, step):
    u_old = np.array(u_old) * np.array([1.0, 1.0]) + np.array([0.0, 1.0])
    out = keep_interior(u_old, u_old + np.array(step), BOX)
    assert in_domain(out, BOX)


def test_keep_interior_leaves_safe_steps_untouched():
    u = np.array([0.5, 0.0, 0.2])
    np.testing.assert_array_equal(keep_interior(u, u + 0.01, B3), u + 0.01)


@pytest.mark.parametrize("lo,hi,tau", [([0.0], [0.0], 1.0), ([1.0], [0.0], 1.0), ([0.0], [1.0], 0.0)])
def test_invalid_bounds(lo, hi, tau):
    with pytest.raises(ValueError):
        validate_bounds(Bounds(np.array(lo), np.array(hi), tau))


def test_stage_derivs_reject_points_outside_domain(scenario):
    with pytest.raises(ValueError, match="outside the barrier domain"):
        stage_cost_derivs(np.ones(3), np.array([0.0, 0.0, 0.0]), scenario.cost, scenario.bounds)


def test_perturbed_ocp_solution_is_stationary(prob):
    rng = np.random.default_rng(0)
    y = np.array([1.1, 4.5, 0.02])
    sigma = 0.05 * rng.standard_normal((prob.N, 3))
    u0 = np.tile(interior_reference(prob.cost, prob.bounds), (prob.N, 1))
    xs, us, _ = solve_perturbed_ocp(prob, y, u0, sigma=sigma)
    # central differences of the rolled-out objective vanish at the solution
    eps = 1e-6
    for k, i in [(0, 0), (3, 1), (7, 2), (prob.N - 1, 0)]:
        e = np.zeros_like(us)
        e[k, i] = eps
        d = (objective(prob, y, us + e, sigma) - objective(prob, y, us - e, sigma)) / (2 * eps)
        assert abs(d) <= 1e-6


def test_gauss_newton_and_exact_expansions_share_gradients(prob):
    xs = np.tile([1.0, 5.0, 0.0], (prob.N + 1, 1))
    us = np.tile([0.6, 0.0, 0.01], (prob.N, 1))
    gn = assemble_qp(prob, xs, us)
    ex = assemble_qp(prob, xs, us, lams=np.ones((prob.N + 1, 3)))
    np.testing.assert_array_equal(gn.gu, ex.gu)
    np.testing.assert_array_equal(gn.gx, ex.gx)
    assert np.abs(gn.Huu - ex.Huu).max() > 0
