import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traffic_incentives.agents import Game, agent_gradient, aggregate_flow, make_agent, own_jacobian, pseudo_gradient
from traffic_incentives.harness.oracles import enumerate_projection, fd_jacobian, ldp_projection
from traffic_incentives.harness.scenario import small_scenario
from traffic_incentives.network import make_network
from traffic_incentives.projection import (DUAL_TOL, SLACK_TOL, EmptyPolyhedronError, Polyhedron,
                                           ProjectionConvergenceError, ProjectionWorkspace, classify_active, project,
                                           projection_jacobian, step_jacobians)


def random_poly(rng, n=5, n_eq=1, n_in=2, upper=True):
    x0 = rng.uniform(0.2, 0.8, n)
    A_eq = rng.normal(size=(n_eq, n))
    A_in = rng.normal(size=(n_in, n))
    up = np.ones(n) if upper else np.full(n, np.inf)
    return Polyhedron(A_eq, A_eq @ x0, A_in, A_in @ x0 + rng.uniform(0, 0.3, n_in), np.zeros(n), up), x0


def strict(poly, res, scale=10.0):
    """Every constraint either clearly slack or carrying a clearly positive multiplier."""
    s_in = poly.b_in - poly.A_in @ res.point
    s_lo = res.point - poly.lower
    s_up = poly.upper - res.point
    ok_in = (s_in > scale * SLACK_TOL) | (res.in_duals > scale * DUAL_TOL)
    ok_lo = (s_lo > scale * SLACK_TOL) | (res.lower_duals > scale * DUAL_TOL)
    ok_up = (s_up > scale * SLACK_TOL) | (res.upper_duals > scale * DUAL_TOL)
    return ok_in.all() and ok_lo.all() and ok_up.all()


def test_feasible_point_unchanged(rng):
    poly, x0 = random_poly(rng)
    res = project(poly, x0)
    np.testing.assert_allclose(res.point, x0, atol=1e-12)
    assert np.all(res.in_duals == 0)


def test_unit_box():
    poly = Polyhedron(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros(0), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(project(poly, [2.0, 0.5]).point, [1.0, 0.5])


def test_empty_polyhedron():
    with pytest.raises(EmptyPolyhedronError):
        Polyhedron(np.ones((1, 2)), [5.0], np.zeros((0, 2)), np.zeros(0), np.zeros(2), np.ones(2))


def test_matches_enumeration(rng):
    for _ in range(50):
        poly, x0 = random_poly(rng, upper=False)
        z = x0 + rng.normal(scale=1.5, size=5)
        res = project(poly, z, tol=1e-12)
        np.testing.assert_allclose(res.point, enumerate_projection(poly, z), atol=1e-8)
        assert res.kkt_residual <= 1e-12 * poly.rhs_scale


def test_matches_least_distance_oracle(rng):
    for _ in range(100):
        poly, x0 = random_poly(rng, n=6, n_in=3)
        z = x0 + rng.normal(scale=1.0, size=6)
        np.testing.assert_allclose(project(poly, z, tol=1e-12).point, ldp_projection(poly, z), atol=1e-8)


def test_complementary_slackness(rng):
    for _ in range(30):
        poly, x0 = random_poly(rng, n_in=3)
        res = project(poly, x0 + rng.normal(size=5), tol=1e-12)
        assert np.abs(res.in_duals * (poly.b_in - poly.A_in @ res.point)).max() <= 1e-10
        assert res.in_duals.min() >= 0 and res.lower_duals.min() >= 0 and res.upper_duals.min() >= 0


def test_warm_start_invariance(rng):
    poly, x0 = random_poly(rng, n=8, n_eq=2, n_in=4)
    ws = ProjectionWorkspace(poly)
    for _ in range(40):
        z = x0 + rng.normal(scale=1.0, size=8)
        warm = project(poly, z, tol=1e-12, workspace=ws).point
        cold = project(poly, z, tol=1e-12).point
        np.testing.assert_allclose(warm, cold, atol=1e-9)


def test_convergence_failure_carries_residual(rng):
    poly, x0 = random_poly(rng)
    with pytest.raises(ProjectionConvergenceError) as info:
        project(poly, x0 + 3.0, tol=0.0)
    assert np.isfinite(info.value.best_residual)


def test_jacobian_no_active_constraints():
    poly = Polyhedron(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.full(3, -5.0), np.full(3, 5.0))
    res = project(poly, [0.1, 0.2, 0.3])
    np.testing.assert_allclose(projection_jacobian(poly, res), np.eye(3), atol=1e-14)


def test_jacobian_single_hyperplane(rng):
    u = rng.normal(size=4)
    u /= np.linalg.norm(u)
    poly = Polyhedron(u[None], [0.0], np.zeros((0, 4)), np.zeros(0), np.full(4, -10.0), np.full(4, 10.0))
    res = project(poly, rng.normal(size=4))
    np.testing.assert_allclose(projection_jacobian(poly, res), np.eye(4) - np.outer(u, u), atol=1e-12)


def test_jacobian_vertex(rng):
    A = rng.normal(size=(3, 3))
    v = rng.uniform(-1, 1, 3)
    poly = Polyhedron(np.zeros((0, 3)), np.zeros(0), A, A @ v, np.full(3, -10.0), np.full(3, 10.0))
    z = v + A.T @ rng.uniform(0.5, 1.0, 3)
    res = project(poly, z, tol=1e-12)
    np.testing.assert_allclose(res.point, v, atol=1e-9)
    np.testing.assert_allclose(projection_jacobian(poly, res), 0, atol=1e-10)
    fd = fd_jacobian(lambda x: project(poly, x, tol=1e-13).point, z, step=1e-6)
    np.testing.assert_allclose(fd, 0, atol=1e-6)


def test_jacobian_symmetric_idempotent(rng):
    for _ in range(30):
        poly, x0 = random_poly(rng, n=6, n_eq=2, n_in=3)
        res = project(poly, x0 + rng.normal(size=6), tol=1e-12)
        D = projection_jacobian(poly, res)
        np.testing.assert_allclose(D, D.T, atol=1e-8)
        np.testing.assert_allclose(D @ D, D, atol=1e-8)
        eig = np.linalg.eigvalsh(0.5 * (D + D.T))
        assert np.all(np.minimum(np.abs(eig), np.abs(eig - 1)) < 1e-8)


def test_jacobian_matches_fd_at_strict_points(rng):
    checked = 0
    while checked < 20:
        poly, x0 = random_poly(rng, n=5, n_in=3)
        z = x0 + rng.normal(scale=0.8, size=5)
        res = project(poly, z, tol=1e-13)
        if not strict(poly, res):
            continue
        fd = fd_jacobian(lambda x: project(poly, x, tol=1e-13).point, z, step=1e-6)
        np.testing.assert_allclose(projection_jacobian(poly, res), fd, atol=1e-5)
        checked += 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_nonexpansive(seed):
    rng = np.random.default_rng(seed)
    poly, x0 = random_poly(rng, n=6, n_eq=1, n_in=3)
    z1, z2 = x0 + rng.normal(scale=2, size=(2, 6))
    p1, p2 = project(poly, z1).point, project(poly, z2).point
    assert np.linalg.norm(p1 - p2) <= np.linalg.norm(z1 - z2) + 1e-9


def test_classify_active_includes_weak(rng):
    poly = Polyhedron(np.zeros((0, 2)), np.zeros(0), np.array([[1.0, 1.0]]), [1.0], np.zeros(2), np.ones(2))
    # z on the face itself: the row is active with zero multiplier
    act = classify_active(poly, project(poly, [0.5, 0.5]).point)
    assert list(act.inequality) == [0]


# step Jacobians ----------------------------------------------------------------

def _one_agent_interior():
    net = make_network([(1, 2, 0.3, 0.05, 1), (2, 1, 0.3, 0.05, 1), (1, 3, 0.2, 0.04, 0), (3, 1, 0.2, 0.04, 0),
                        (2, 3, 0.1, 0.02, 0), (3, 2, 0.1, 0.02, 0)], charge_nodes=[2], park_nodes=[3])
    return Game(net, [make_agent(net, 0, "pev", 2.0, 1, 3, 5.0, energy_demand=3.0)], [0.35], [2.0])


def test_step_jacobians_zero_step():
    game = small_scenario(0).game
    y = game.polyhedra[0].feasible_point
    sigma = aggregate_flow(game, np.array([p.feasible_point for p in game.polyhedra]))
    D = np.eye(game.n_i)
    S1, S2, S3 = step_jacobians(game, 0, np.zeros(game.m), y, sigma, 0.0, D)
    assert np.all(S1 == 0) and np.all(S3 == 0)
    np.testing.assert_array_equal(S2, D)


def test_step_jacobians_interior_matches_fd():
    game = _one_agent_interior()
    gamma = 0.01
    c = np.zeros(game.m)
    y = np.full(game.n_i, 0.3)
    D = np.eye(game.n_i)
    _, S2, S3 = step_jacobians(game, 0, c, y, aggregate_flow(game, y[None]), gamma, D)
    np.testing.assert_allclose(S2, np.eye(game.n_i) - gamma * own_jacobian(game, 0), atol=1e-15)

    # unconstrained map y -> y - gamma F(c, y); the aggregate moves with y through P * phi
    def h(v):
        return v - gamma * pseudo_gradient(game, c, v[None])[0]
    dsigma = np.zeros((game.network.n_e, game.n_i))
    dsigma[:, game.phi] = game.P[0] * np.eye(game.network.n_e)
    np.testing.assert_allclose(fd_jacobian(h, y), S2 + S3 @ dsigma, atol=1e-8)


def test_discount_partial_exact():
    game = _one_agent_interior()
    y = np.full(game.n_i, 0.3)
    sigma = aggregate_flow(game, y[None])
    c = np.zeros(game.m)
    k = game.discount_index(0, "charge", 2)
    c2 = c.copy()
    c2[k] = 0.05
    j = game.network.n_e + game.network.index(2)
    diff = agent_gradient(game, 0, c2, y, sigma)[j] - agent_gradient(game, 0, c, y, sigma)[j]
    assert diff == pytest.approx(-game.q[0] * 0.05, abs=1e-14)


def test_fv_rows_of_s1_zero():
    game = small_scenario(1, n_agents=3, n_pev=1).game
    i = 2
    assert game.agents[i].kind.value == "fv"
    Y = np.array([p.feasible_point for p in game.polyhedra])
    sigma = aggregate_flow(game, Y)
    F = agent_gradient(game, i, np.zeros(game.m), Y[i], sigma)
    res = project(game.polyhedra[i], Y[i] - 0.01 * F)
    D = projection_jacobian(game.polyhedra[i], res)
    S1, _, _ = step_jacobians(game, i, np.zeros(game.m), Y[i], sigma, 0.01, D)
    assert np.all(S1[game.gc] == 0)


def test_step_jacobians_shape_check():
    game = small_scenario(0).game
    with pytest.raises(ValueError):
        step_jacobians(game, 0, np.zeros(game.m + 1), np.zeros(game.n_i), np.zeros(game.network.n_e), 0.1,
                       np.eye(game.n_i))
