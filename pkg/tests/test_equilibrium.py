import csv

import numpy as np
import pytest

from traffic_incentives.agents import Game, aggregate_flow, aggregate_sensitivity, make_agent, pseudo_gradient
from traffic_incentives.equilibrium import DivergenceError, InnerSolver, inner_loop, verify_ne
from traffic_incentives.harness.oracles import brute_force_ne, fd_sensitivity, kink_gap
from traffic_incentives.harness.scenario import small_scenario
from traffic_incentives.network import make_network
from traffic_incentives.projection import project, projection_jacobian, step_jacobians


def singleton_game():
    net = make_network([(1, 2, 0.2, 0.01, 1.0), (2, 1, 0.2, 0.01, 1.0)], park_nodes=[2])
    return Game(net, [make_agent(net, 0, "fv", 3.0, 1, 2, 10.0)], [], [4.0])


def shared_edge_game():
    """Two agents from node 1 to node 3 sharing the congested direct road or detouring via a charger."""
    net = make_network([(1, 3, 0.2, 0.05, 2.0), (3, 1, 0.2, 0.05, 0.0), (1, 2, 0.15, 0.03, 0.0),
                        (2, 1, 0.15, 0.03, 0.0), (2, 3, 0.1, 0.03, 0.0), (3, 2, 0.1, 0.03, 0.0)],
                       charge_nodes=[2], park_nodes=[3])
    agents = [make_agent(net, 0, "pev", 4.0, 1, 3, 6.0, energy_demand=8.0, min_charge=0.1, eps_w=0.05),
              make_agent(net, 1, "fv", 5.0, 1, 3, 8.0, eps_w=0.05)]
    return Game(net, agents, [0.35], [2.5])


def test_singleton_from_any_start(rng):
    game = singleton_game()
    Y, S, rep = inner_loop(game, rng.uniform(0, 1, game.m), Y0=rng.uniform(0, 1, (1, game.n_i)))
    expected = np.zeros(game.n_i)
    expected[0] = 1.0
    expected[game.network.n_e + game.network.n_v + game.network.index(2)] = 1.0
    np.testing.assert_allclose(Y[0], expected, atol=1e-12)
    assert verify_ne(game, np.zeros(game.m), Y).worst_violation == pytest.approx(0.0, abs=1e-12)


def test_fixed_point_input_stops_immediately():
    game = shared_edge_game()
    c = np.array([0.05, 0.3, 0.02, 0.1])
    Y, S, _ = inner_loop(game, c, tol=1e-12, max_iters=100000)
    Y2, S2, rep = inner_loop(game, c, Y0=Y, S0=S, tol=1e-9)
    assert rep.iterations == 1
    assert rep.residual <= 1e-9


def test_shared_edge_matches_oracles():
    game = shared_edge_game()
    c = np.array([0.05, 0.3, 0.02, 0.1])
    Y, S, rep = inner_loop(game, c, tol=1e-12, max_iters=100000)
    assert rep.converged
    ref = brute_force_ne(game, c, tol=1e-11)
    np.testing.assert_allclose(Y, ref.profile, atol=1e-6)
    assert ref.best_response_move < 1e-8
    assert kink_gap(game, c, Y0=Y) < 1e-6
    np.testing.assert_allclose(S, fd_sensitivity(game, c, tol=1e-12, Y0=Y), atol=1e-4)
    assert np.abs(S).max() > 1e-3


def test_verify_ne_on_solution_and_perturbation():
    sc = small_scenario(0)
    game = sc.game
    c = np.full(game.m, 0.01)
    Y, _, _ = inner_loop(game, c, tol=1e-10, max_iters=100000)
    F = pseudo_gradient(game, c, Y)
    ok = verify_ne(game, c, Y, tol=1e-5 * (1 + np.abs(F).max()))
    assert ok.ok
    # move one agent 10% toward a vertex of its set
    poly = game.polyhedra[1]
    from scipy.optimize import linprog
    vertex = linprog(-F[1], A_ub=poly.A_in, b_ub=poly.b_in, A_eq=poly.A_eq, b_eq=poly.b_eq,
                     bounds=list(zip(poly.lower, poly.upper)), method="highs").x
    Z = Y.copy()
    Z[1] = 0.9 * Y[1] + 0.1 * vertex
    bad = verify_ne(game, c, Z, tol=1e-8)
    assert not bad.ok and bad.worst_violation > 0
    assert bad.br_gaps[1] > 0


@pytest.mark.parametrize("seed", [0, 3])
def test_unique_from_random_starts(seed):
    game = small_scenario(seed).game
    rng = np.random.default_rng(seed)
    c = rng.uniform(0, 0.1, game.m)
    sols = []
    for _ in range(10):
        Y0 = rng.uniform(0, 1, (game.N, game.n_i))
        Y, _, rep = inner_loop(game, c, Y0=Y0, tol=1e-10, max_iters=100000, compute_sensitivity=False)
        assert rep.converged
        sols.append(Y)
    for a in sols:
        for b in sols:
            assert np.abs(a - b).max() <= 1e-5


def test_residual_tail_decreasing():
    game = small_scenario(0).game
    _, _, rep = inner_loop(game, np.zeros(game.m), tol=1e-10, max_iters=100000, record_trace=True)
    r = np.array([t[1] for t in rep.trace])
    tail = r[len(r) // 2:]
    assert np.all(np.diff(tail) <= 1e-12 + 1e-9 * tail[:-1])


def test_sensitivity_fixed_point():
    sc = small_scenario(5)
    game = sc.game
    c = np.random.default_rng(5).uniform(0, 1, game.m) * sc.problem.upper_bounds(game)
    solver = InnerSolver(game)
    tol = 1e-10
    Y, S, rep = solver.run(c, tol=tol, max_iters=100000)
    sigma = aggregate_flow(game, Y)
    sigma_s = aggregate_sensitivity(game, S)
    F = pseudo_gradient(game, c, Y)
    for i in range(game.N):
        res = project(game.polyhedra[i], Y[i] - solver.gamma * F[i], tol=1e-12)
        D = projection_jacobian(game.polyhedra[i], res)
        S1, S2, S3 = step_jacobians(game, i, c, Y[i], sigma, solver.gamma, D)
        assert np.linalg.norm(S2 @ S[i] + S3 @ sigma_s + S1 - S[i]) <= 10 * tol


@pytest.mark.parametrize("seed", range(4))
def test_parking_discount_monotone(seed):
    sc = small_scenario(seed)
    game = sc.game
    upper = sc.problem.upper_bounds(game)
    solver = InnerSolver(game)
    c = 0.3 * upper
    Y, _, _ = solver.run(c, tol=1e-11, max_iters=100000, compute_sensitivity=False)
    for i in range(game.N):
        for node in game.network.park_nodes:
            k = game.discount_index(i, "park", node)
            c2 = c.copy()
            c2[k] = upper[k]
            Y2, _, _ = solver.run(c2, Y, tol=1e-11, max_iters=100000, compute_sensitivity=False)
            j = game.network.n_e + game.network.n_v + game.network.index(node)
            assert Y2[i, j] >= Y[i, j] - 1e-8


def test_divergence_detected():
    game = small_scenario(0).game
    with pytest.raises(DivergenceError, match="smaller step"):
        inner_loop(game, np.zeros(game.m), gamma=5.0, max_iters=500, compute_sensitivity=False)


def test_threads_deterministic():
    game = small_scenario(2, n_agents=4).game
    c = np.full(game.m, 0.05)
    Y1, S1, _ = inner_loop(game, c, tol=1e-9)
    Y2, S2, _ = inner_loop(game, c, tol=1e-9, threads=3)
    np.testing.assert_array_equal(Y1, Y2)
    np.testing.assert_array_equal(S1, S2)


def test_trace_csv(tmp_path):
    game = small_scenario(0).game
    _, _, rep = inner_loop(game, np.zeros(game.m), tol=1e-6, record_trace=True)
    path = tmp_path / "trace.csv"
    rep.write_trace(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["iteration", "residual_y", "residual_s", "zeta"]
    assert len(rows) == rep.iterations + 1
    assert rows[1][3] == "1"


def test_bad_start_rejected():
    game = small_scenario(0).game
    with pytest.raises(ValueError):
        inner_loop(game, np.zeros(game.m), Y0=np.full((game.N, game.n_i), 2.0))
