"""Experiment drivers behind the command line: solve, budget sweep, uniform
versus personalized comparison, scalability timing and oracle validation.

Every driver returns plain rows; :func:`write_csv` turns them into files.
CSV schemas (header rows are written verbatim):

* results: ``budget, mode, objective, TTT_baseline, TTT_final, reduction_pct, spend, wall_time``
* trace: ``iteration, objective, ttt, spend, grad_norm, inner_iterations, step_time``
* discounts: ``agent, facility, node, discount, upper``
* scale: ``n_v, n_e, n_agents, n_i, inner_iterations, inner_time_per_iter, max_agent_time_per_iter, outer_step_time``
* validate: ``check, ok, value, threshold``
"""
from __future__ import annotations

import csv
import time
from dataclasses import astuple, dataclass, field

import numpy as np

from ..agents import Game, aggregate_flow, monotonicity_certificate
from ..equilibrium import InnerSolver
from ..incentives import BUDGET_SLACK, SolveReport, budget_spend, outer_loop, solve, ta_objective, ttt
from .scenario import Scenario, generate_agents, synthetic_network

RESULT_HEADER = ["budget", "mode", "objective", "TTT_baseline", "TTT_final", "reduction_pct", "spend", "wall_time"]
TRACE_HEADER = ["iteration", "objective", "ttt", "spend", "grad_norm", "inner_iterations", "step_time"]
DISCOUNT_HEADER = ["agent", "facility", "node", "discount", "upper"]
SCALE_HEADER = ["n_v", "n_e", "n_agents", "n_i", "inner_iterations", "inner_time_per_iter",
                "max_agent_time_per_iter", "outer_step_time"]
VALIDATE_HEADER = ["check", "ok", "value", "threshold"]

FINAL_TOL = 1e-10  # inner tolerance when re-evaluating reported equilibria


@dataclass
class ResultRow:
    budget: float
    mode: str
    objective: str
    TTT_baseline: float
    TTT_final: float
    reduction_pct: float
    spend: float
    wall_time: float


@dataclass
class Outcome:
    """One optimized operating point, re-evaluated at a tight inner tolerance."""

    c: np.ndarray
    Y: np.ndarray
    ttt: float
    spend: float
    report: SolveReport | None = None


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)

    def write(self, path) -> None:
        write_csv(path, RESULT_HEADER, [astuple(r) for r in self.rows])


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def reduction_pct(baseline: float, final: float) -> float:
    return 100.0 * (baseline - final) / baseline if baseline else 0.0


def evaluate(scenario: Scenario, solver: InnerSolver, c: np.ndarray, Y0=None) -> tuple[np.ndarray, float, float]:
    """Equilibrium, TTT and spend at ``c`` with a tight inner solve."""
    g = scenario.game
    Y, _, _ = solver.run(c, Y0, tol=FINAL_TOL, compute_sensitivity=False)
    return Y, ttt(g, aggregate_flow(g, Y), scenario.problem.edges), budget_spend(g, c, Y)


def baseline(scenario: Scenario, solver: InnerSolver) -> Outcome:
    c = np.zeros(scenario.game.m)
    Y, t, s = evaluate(scenario, solver, c)
    return Outcome(c, Y, t, s)


def optimize(scenario: Scenario, solver: InnerSolver, c0=None, incumbent: Outcome | None = None,
             threads: int = 1) -> Outcome:
    """Run the penalized outer loop and re-evaluate its best budget-feasible iterate.

    ``incumbent`` is a known operating point that is admissible for this
    problem (for instance the optimum of a smaller budget); it is returned
    instead when the new run does not beat it.
    """
    g, problem = scenario.game, scenario.problem
    report = solve(g, problem, scenario.schedules, c0=c0, threads=threads, gamma=scenario.solver.gamma,
                   max_iters=scenario.solver.max_outer)
    Y, t, s = evaluate(scenario, solver, report.final_c, report.final_Y)
    out = Outcome(report.final_c, Y, t, s, report)
    feasible = s <= problem.budget * (1 + BUDGET_SLACK)
    if incumbent is not None and (not feasible or _score(scenario, incumbent) <= _score(scenario, out)):
        return Outcome(incumbent.c, incumbent.Y, incumbent.ttt, incumbent.spend, report)
    return out


def _score(scenario: Scenario, o: Outcome) -> float:
    """Unpenalized upper-level objective of an operating point."""
    p = scenario.problem
    return ta_objective(scenario.game, o.c, o.Y, p.with_(budget=max(o.spend, p.budget)))


def _solver(scenario: Scenario, threads: int) -> InnerSolver:
    return InnerSolver(scenario.game, gamma=scenario.solver.gamma, step_rule=scenario.solver.step_rule,
                       threads=threads)


def _mode(scenario: Scenario) -> str:
    return "uniform" if scenario.problem.uniform else "personalized"


def run_solve(scenario: Scenario, threads: int = 1) -> ExperimentResult:
    t0 = time.perf_counter()
    solver = _solver(scenario, threads)
    try:
        base = baseline(scenario, solver)
        if scenario.game.N == 0:
            out = base
        else:
            out = optimize(scenario, solver, threads=threads)
    finally:
        solver.close()
    row = ResultRow(scenario.problem.budget, _mode(scenario), scenario.problem.objective, base.ttt, out.ttt,
                    reduction_pct(base.ttt, out.ttt), out.spend, time.perf_counter() - t0)
    return ExperimentResult([row], [out])


def sweep_budget(scenario: Scenario, budgets, threads: int = 1) -> ExperimentResult:
    """Optimize for each budget in increasing order.

    Each run starts from the previous budget's optimum, which stays
    admissible when the budget grows, so the reported reduction cannot
    drop as the budget increases.
    """
    budgets = sorted(float(b) for b in budgets)
    result = ExperimentResult()
    solver = _solver(scenario, threads)
    try:
        base = baseline(scenario, solver)
        prev: Outcome | None = None
        for budget in budgets:
            t0 = time.perf_counter()
            sc = scenario.with_problem(budget=budget)
            if scenario.game.N == 0 or budget == 0:
                out = Outcome(base.c, base.Y, base.ttt, base.spend)
            else:
                out = optimize(sc, solver, c0=None if prev is None else prev.c, incumbent=prev, threads=threads)
            prev = out
            result.outcomes.append(out)
            result.rows.append(ResultRow(budget, _mode(sc), sc.problem.objective, base.ttt, out.ttt,
                                         reduction_pct(base.ttt, out.ttt), out.spend, time.perf_counter() - t0))
    finally:
        solver.close()
    return result


def compare_uniform(scenario: Scenario, threads: int = 1) -> ExperimentResult:
    """Uniform optimum first, then personalized discounts started from it.

    A uniform discount vector is admissible for the personalized problem,
    so the personalized run keeps it whenever it finds nothing better.
    """
    result = ExperimentResult()
    solver = _solver(scenario, threads)
    try:
        base = baseline(scenario, solver)
        prev = None
        for uniform in (True, False):
            t0 = time.perf_counter()
            sc = scenario.with_problem(uniform=uniform)
            if scenario.game.N == 0:
                out = base
            else:
                out = optimize(sc, solver, c0=None if prev is None else prev.c, incumbent=prev, threads=threads)
            prev = out
            result.outcomes.append(out)
            result.rows.append(ResultRow(sc.problem.budget, _mode(sc), sc.problem.objective, base.ttt, out.ttt,
                                         reduction_pct(base.ttt, out.ttt), out.spend, time.perf_counter() - t0))
    finally:
        solver.close()
    return result


def trace_rows(report: SolveReport):
    return list(report.rows())


def discount_rows(scenario: Scenario, c: np.ndarray):
    g = scenario.game
    net = g.network
    upper = scenario.problem.upper_bounds(g)
    labels = [("charge", v) for v in net.charge_nodes] + [("park", v) for v in net.park_nodes]
    rows = []
    for i, a in enumerate(g.agents):
        for k, (kind, node) in enumerate(labels):
            j = i * g.n_disc + k
            rows.append((a.id, kind, node, float(c[j]), float(upper[j])))
    return rows


# ---------------------------------------------------------------------------
# Scalability
# ---------------------------------------------------------------------------

SCALE_AGENTS = {"n_pev": 2, "n_fv": 2, "n_veh": 200, "penetration": 1.0}


def scale_bench(sizes=(25, 50, 100), seed: int = 0, inner_iters: int = 20, outer_iters: int = 2,
                threads: int = 1, agents: dict | None = None):
    """Time the inner iteration and the outer step on synthetic grids.

    The inner loop runs a fixed number of iterations so every size does the
    same amount of work per iteration; the outer step time is the mean wall
    time of an outer iteration including its inner solve. Returns
    ``(rows, exponent)`` with the log-log slope of inner time per iteration
    against ``n_v``.
    """
    from ..incentives import Schedules, TAProblem

    rows = []
    for n_v in sizes:
        net = synthetic_network(int(n_v), seed)
        rng = np.random.default_rng(seed)
        game = Game(net, generate_agents(net, {**SCALE_AGENTS, **(agents or {})}, rng),
                    np.full(net.n_c, 0.35), np.full(net.n_p, 17.0))
        solver = InnerSolver(game, threads=threads)
        try:
            c = np.zeros(game.m)
            _, _, rep = solver.run(c, tol=0.0, max_iters=inner_iters)
            problem = TAProblem(edges=np.arange(net.n_e), budget=1e3,
                                caps=np.concatenate([np.full(net.n_c, 0.2), np.full(net.n_p, 0.25)]))
            report = outer_loop(game, problem, Schedules(alpha0=1e-3), max_iters=outer_iters, solver=solver)
        finally:
            solver.close()
        outer = float(np.mean(report.step_time[:-1])) if report.iterations > 1 else float(report.step_time[0])
        rows.append((int(n_v), net.n_e, game.N, game.n_i, rep.iterations, rep.time_per_iteration,
                     rep.slowest_agent_time / rep.iterations, outer))
    return rows, fit_exponent([r[0] for r in rows], [r[5] for r in rows])


def fit_exponent(sizes, times) -> float:
    """Slope of ``log(time)`` against ``log(size)`` by least squares."""
    x = np.log(np.asarray(sizes, dtype=float))
    y = np.log(np.asarray(times, dtype=float))
    if x.size < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate(seed: int = 0, quick: bool = True):
    """Run the oracle suites on small seeded instances.

    Returns rows ``(check, ok, value, threshold)``; ``value`` is the observed
    discrepancy (or statistic) and ``threshold`` what it is compared with.
    """
    from . import oracles
    from ..agents import agent_cost, pseudo_gradient
    from ..equilibrium import verify_ne
    from ..incentives import Schedules, hypergradient, ta_partials, validate_schedules
    from ..projection import Polyhedron, project, projection_jacobian
    from .scenario import small_scenario

    rows = []

    def check(name, value, threshold, le=True):
        ok = bool(value <= threshold) if le else bool(value >= threshold)
        rows.append((name, ok, float(value), float(threshold)))

    rng = np.random.default_rng(seed)

    # projection against active-set enumeration, Jacobian against finite differences
    worst_p = worst_d = worst_sym = 0.0
    for _ in range(10 if quick else 50):
        n = 5
        A_in = rng.normal(size=(3, n))
        x0 = rng.uniform(0.2, 0.8, n)
        A_eq = rng.normal(size=(1, n))
        poly = Polyhedron(A_eq, A_eq @ x0, A_in, A_in @ x0 + rng.uniform(0.0, 0.3, 3), np.zeros(n), np.ones(n))
        z = x0 + rng.normal(scale=1.0, size=n)
        res = project(poly, z, tol=1e-12)
        worst_p = max(worst_p, float(np.abs(res.point - oracles.enumerate_projection(poly, z)).max()))
        D = projection_jacobian(poly, res)
        worst_sym = max(worst_sym, float(np.abs(D - D.T).max()), float(np.abs(D @ D - D).max()))
    check("projection matches enumeration", worst_p, 1e-8)
    check("projection Jacobian symmetric idempotent", worst_sym, 1e-8)

    sc = small_scenario(seed)
    g, problem = sc.game, sc.problem
    c = rng.uniform(0, 1, g.m) * problem.upper_bounds(g)
    Y = np.array([p.feasible_point for p in g.polyhedra])

    # pseudo-gradient against finite differences of each agent's cost
    sigma = aggregate_flow(g, Y)
    F = pseudo_gradient(g, c, Y)
    worst = 0.0
    for i in range(g.N):
        def f(y, i=i):
            Z = Y.copy()
            Z[i] = y
            return agent_cost(g, i, c, y, aggregate_flow(g, Z))
        fd = oracles.fd_gradient(f, Y[i])
        worst = max(worst, float(np.abs(fd - F[i]).max() / (1 + np.abs(F[i]).max())))
    check("pseudo-gradient matches finite differences", worst, 1e-5)

    g1, g2 = ta_partials(g, c, Y, problem)
    fd1 = oracles.fd_gradient(lambda x: ta_objective(g, x, Y, problem), c)
    fd2 = oracles.fd_gradient(lambda Z: ta_objective(g, c, Z.reshape(Y.shape), problem), Y.ravel())
    err = max(np.abs(fd1 - g1).max() / (1 + np.abs(g1).max()), np.abs(fd2 - g2.ravel()).max() / (1 + np.abs(g2).max()))
    check("upper-level partials match finite differences", err, 1e-5)

    # equilibrium against extragradient
    mu, _ = monotonicity_certificate(g)
    check("monotonicity certificate positive", mu, 0.0, le=False)
    solver = InnerSolver(g)
    Yn, S, rep = solver.run(c, tol=1e-11, max_iters=100000)
    ref = oracles.brute_force_ne(g, c, tol=1e-10)
    check("inner loop matches extragradient oracle", float(np.abs(Yn - ref.profile).max()), 1e-6)
    check("best responses do not move", ref.best_response_move, 1e-8)
    check("equilibrium gap", verify_ne(g, c, Yn, 1e-8).worst_violation, 1e-8)

    # sensitivity and hypergradient against finite differences
    gap = oracles.kink_gap(g, c, Y0=Yn)
    if gap < 1e-6:
        fd_s = oracles.fd_sensitivity(g, c, tol=1e-12, Y0=Yn)
        check("sensitivity matches finite differences", float(np.abs(fd_s - S).max()), 1e-4)
        hg = hypergradient(g, c, Yn, S, problem)
        fd_h = oracles.implicit_objective_fd(g, problem, c, tol=1e-12)
        check("hypergradient matches finite differences",
              float(np.linalg.norm(hg - fd_h) / max(np.linalg.norm(fd_h), 1e-12)), 1e-3)
    else:
        rows.append(("sensitivity matches finite differences (skipped: nonsmooth point)", True, gap, 1e-6))

    bad = [validate_schedules(Schedules(p=1.0, q=0.5)) == [], validate_schedules(Schedules(p=0.4)) != [],
           validate_schedules(Schedules(p=1.0, q=0.0)) != []]
    check("schedule gate", float(not all(bad)), 0.0)
    return rows
