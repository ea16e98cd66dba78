"""Traffic-authority side: objectives, hypergradient and the outer loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .agents import Game, aggregate_flow
from .equilibrium import InnerSolver

log = logging.getLogger(__name__)

BUDGET_SLACK = 1e-3
OBJECTIVES = ("ttt", "revenue")


class ScheduleError(ValueError):
    """Step-size/tolerance schedules violating the convergence conditions."""


@dataclass(frozen=True, eq=False)
class TAProblem:
    """Upper-level data.

    ``edges`` are indices of the edges to decongest; ``caps`` are the
    fractions of the base price that may be discounted, either one per
    discount coordinate (length ``m``) or one per facility (length
    ``n_c + n_p``, shared by all agents).
    """

    edges: np.ndarray
    budget: float
    mu: float = 1e3
    caps: np.ndarray = field(default=None)  # type: ignore[assignment]
    uniform: bool = False
    objective: str = "ttt"

    def __post_init__(self):
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=np.int64).reshape(-1))
        if self.caps is not None:
            object.__setattr__(self, "caps", np.asarray(self.caps, dtype=float).reshape(-1))
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.mu <= 0:
            raise ValueError("penalty weight must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.caps is not None and np.any((self.caps <= 0) | (self.caps >= 1)):
            raise ValueError("discount caps must lie in (0, 1)")

    def with_(self, **kw) -> "TAProblem":
        doc = dict(edges=self.edges, budget=self.budget, mu=self.mu, caps=self.caps, uniform=self.uniform,
                   objective=self.objective)
        doc.update(kw)
        return TAProblem(**doc)

    def upper_bounds(self, game: Game) -> np.ndarray:
        """Largest admissible discount per coordinate (length ``m``)."""
        base = game.base_prices()
        if self.caps is None:
            raise ValueError("discount caps are not set")
        if self.caps.size == game.n_disc:
            theta = np.tile(self.caps, game.N)
        elif self.caps.size == game.m:
            theta = self.caps
        else:
            raise ValueError(f"caps must have length {game.n_disc} or {game.m}")
        return theta * base

    def check(self, game: Game) -> None:
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= game.network.n_e):
            raise ValueError("decongestion edge index out of range")
        self.upper_bounds(game)


# ---------------------------------------------------------------------------
# Objectives and partial derivatives
# ---------------------------------------------------------------------------

def ttt(game: Game, sigma: np.ndarray, edges: np.ndarray) -> float:
    """Total travel time (hours) over ``edges``."""
    net = game.network
    x = net.h[edges] + np.asarray(sigma)[edges]
    return float(np.sum(x * (net.a[edges] + net.b[edges] * x)))


def budget_spend(game: Game, c: np.ndarray, Y: np.ndarray) -> float:
    """Money paid out: charging discounts weighted by energy demand, parking by population."""
    if game.N == 0:
        return 0.0
    dc, dp = game.node_discounts(c)
    charge = game.q * np.sum(Y[:, game.gc] * dc, axis=1)
    park = game.P * np.sum(Y[:, game.gp] * dp, axis=1)
    return float(np.sum(charge + park))


def budget_penalty(spend: float, budget: float) -> float:
    return max(spend - budget, 0.0) ** 2


def facility_revenue(game: Game, c: np.ndarray, Y: np.ndarray) -> float:
    """Sum over agents of their charging and parking costs."""
    if game.N == 0:
        return 0.0
    dc, dp = game.node_discounts(c)
    charge = game.q * np.sum(Y[:, game.gc] * (game.cbar_c - dc), axis=1)
    park = np.sum(Y[:, game.gp] * (game.cbar_p - dp), axis=1)
    return float(np.sum(charge + park))


def ta_objective(game: Game, c: np.ndarray, Y: np.ndarray, problem: TAProblem) -> float:
    penalty = problem.mu * budget_penalty(budget_spend(game, c, Y), problem.budget)
    if problem.objective == "revenue":
        return -facility_revenue(game, c, Y) + penalty
    return ttt(game, aggregate_flow(game, Y), problem.edges) + penalty


def ta_partials(game: Game, c: np.ndarray, Y: np.ndarray, problem: TAProblem) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the objective in ``c`` (length ``m``) and in the profile (shape ``(N, n_i)``)."""
    net = game.network
    c = np.asarray(c, dtype=float)
    dc, dp = game.node_discounts(c)
    grad_c = np.zeros((game.N, game.n_disc))
    grad_y = np.zeros((game.N, game.n_i))

    excess = max(budget_spend(game, c, Y) - problem.budget, 0.0)
    if excess > 0:
        w = 2 * problem.mu * excess
        grad_c[:, :net.n_c] += w * game.q[:, None] * Y[:, net.n_e + net.charge_idx]
        grad_c[:, net.n_c:] += w * game.P[:, None] * Y[:, net.n_e + net.n_v + net.park_idx]
        grad_y[:, game.gc] += w * game.q[:, None] * dc
        grad_y[:, game.gp] += w * game.P[:, None] * dp

    if problem.objective == "revenue":
        grad_c[:, :net.n_c] += game.q[:, None] * Y[:, net.n_e + net.charge_idx]
        grad_c[:, net.n_c:] += Y[:, net.n_e + net.n_v + net.park_idx]
        grad_y[:, game.gc] -= game.q[:, None] * (game.cbar_c - dc)
        grad_y[:, game.gp] -= game.cbar_p - dp
    else:
        e = problem.edges
        x = net.h[e] + aggregate_flow(game, Y)[e]
        grad_y[:, e] += game.P[:, None] * (net.a[e] + 2 * net.b[e] * x)[None]
    return grad_c.reshape(game.m), grad_y


def hypergradient(game: Game, c: np.ndarray, Y: np.ndarray, S: np.ndarray, problem: TAProblem) -> np.ndarray:
    """``grad_c + S^T grad_y`` with ``S`` the sensitivity of the profile to ``c``."""
    g1, g2 = ta_partials(game, c, Y, problem)
    return g1 + np.einsum("inm,in->m", S, g2)


def project_discounts(c: np.ndarray, upper: np.ndarray, uniform: bool = False, n_agents: int | None = None) -> np.ndarray:
    """Projection onto the admissible discounts.

    Personalized: clamp to ``[0, upper]``. Uniform: every agent gets the
    average discount of the facility, clamped to the smallest cap among the
    agents (which is exact whenever the caps are shared).
    """
    c = np.asarray(c, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if not uniform:
        return np.clip(c, 0.0, upper)
    if not n_agents:
        return c.copy()
    cm = c.reshape(n_agents, -1)
    um = upper.reshape(n_agents, -1)
    shared = np.clip(cm.mean(axis=0), 0.0, um.min(axis=0))
    return np.tile(shared, n_agents)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedules:
    """``alpha_k = alpha0/(k+1)^p`` outer steps and ``sigma_k = sigma0/(k+1)^q`` inner tolerances.

    ``alpha0=None`` selects the initial step by backtracking.
    """

    alpha0: float | None = None
    p: float = 0.75
    sigma0: float = 1e-5
    q: float = 0.5

    def alpha(self, k: int, alpha0: float | None = None) -> float:
        a0 = self.alpha0 if alpha0 is None else alpha0
        return a0 / (k + 1) ** self.p

    def sigma(self, k: int) -> float:
        return self.sigma0 / (k + 1) ** self.q


def validate_schedules(s: Schedules) -> list[str]:
    """Violations of the step/tolerance conditions; empty means valid."""
    out = []
    if s.alpha0 is not None and s.alpha0 < 0:
        out.append("alpha0 must be non-negative")
    if s.sigma0 < 0:
        out.append("sigma0 must be non-negative")
    if s.p <= 0.5:
        out.append(f"p={s.p}: steps are not square-summable (need p > 1/2)")
    if s.p > 1:
        out.append(f"p={s.p}: steps are summable (need p <= 1)")
    if s.p + s.q <= 1:
        out.append(f"p+q={s.p + s.q}: sum of alpha_k sigma_k diverges (need p + q > 1)")
    return out


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

@dataclass
class SolveReport:
    c: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    spend: list = field(default_factory=list)
    ttt: list = field(default_factory=list)
    step_time: list = field(default_factory=list)
    final_c: np.ndarray = None  # type: ignore[assignment]
    final_Y: np.ndarray = None  # type: ignore[assignment]
    final_S: np.ndarray = None  # type: ignore[assignment]
    final_objective: float = np.nan
    final_ttt: float = np.nan
    final_spend: float = 0.0
    best_iteration: int = 0
    alpha0: float = 0.0
    mu: float = 0.0
    wall_time: float = 0.0
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.c)

    def rows(self):
        for k in range(self.iterations):
            yield (k, self.objective[k], self.ttt[k], self.spend[k], self.grad_norm[k], self.inner_iterations[k],
                   self.step_time[k])


def implicit_objective(game: Game, problem: TAProblem, c: np.ndarray, solver: InnerSolver, tol: float,
                       Y0: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Objective at the equilibrium reached from ``Y0`` (no sensitivities)."""
    Y, _, _ = solver.run(c, Y0, None, tol, compute_sensitivity=False)
    return ta_objective(game, c, Y, problem), Y


def step_metric(upper: np.ndarray, metric: str) -> np.ndarray:
    """Diagonal scaling of the descent direction.

    ``"caps"`` measures each discount in units of its admissible range, so a
    unit step moves every coordinate across at most its whole range;
    ``"euclidean"`` is the plain gradient step.
    """
    if metric == "euclidean":
        return np.ones_like(upper)
    if metric == "caps":
        return np.where(upper > 0, upper, 1.0) ** 2
    raise ValueError(f"unknown metric {metric!r}")


def _backtrack(game, problem, solver, c, Y, direction, grad, upper, f0, tol, max_halvings=30):
    scale = np.where(upper > 0, upper, 1.0)
    reach = np.abs(direction / scale).max(initial=0.0)
    if reach == 0:
        return 0.0
    alpha = 1.0 / reach
    for _ in range(max_halvings):
        c_new = project_discounts(c - alpha * direction, upper, problem.uniform, game.N)
        f_new, _ = implicit_objective(game, problem, c_new, solver, tol, Y)
        if f_new <= f0 - 1e-4 * float(grad @ (c - c_new)):
            return alpha
        alpha *= 0.5
    return alpha


def outer_loop(game: Game, problem: TAProblem, schedules: Schedules = Schedules(), c0: np.ndarray | None = None,
               max_iters: int = 500, stop_tol: float = 1e-6, solver: InnerSolver | None = None,
               Y0: np.ndarray | None = None, S0: np.ndarray | None = None, threads: int = 1,
               gamma: float | None = None, metric: str = "caps") -> SolveReport:
    """Projected hypergradient descent on the discounts.

    Each iteration computes the hypergradient from the current discounts,
    equilibrium and sensitivity, takes a projected step, then re-solves the
    inner loop warm started from the previous equilibrium. The step is
    scaled by the fixed diagonal ``metric`` (see :func:`step_metric`). The returned
    ``final_*`` fields describe the iterate with the lowest unpenalized
    objective among those whose spend respects the budget (up to a relative
    slack of 1e-3); the last iterate if none does.
    """
    violations = validate_schedules(schedules)
    if violations:
        raise ScheduleError("; ".join(violations))
    problem.check(game)
    t0 = time.perf_counter()
    report = SolveReport(mu=problem.mu)

    if game.N == 0:
        val = ttt(game, np.zeros(game.network.n_e), problem.edges)
        if problem.objective == "revenue":
            val = 0.0
        report.c.append(np.zeros(0))
        report.objective.append(val)
        report.ttt.append(ttt(game, np.zeros(game.network.n_e), problem.edges))
        report.grad_norm.append(0.0)
        report.inner_iterations.append(0)
        report.spend.append(0.0)
        report.step_time.append(0.0)
        report.final_c = np.zeros(0)
        report.final_Y = np.zeros((0, game.n_i))
        report.final_S = np.zeros((0, game.n_i, 0))
        report.final_objective, report.final_ttt = val, report.ttt[0]
        report.converged = True
        return report

    upper = problem.upper_bounds(game)
    weights = step_metric(upper, metric)
    own_solver = solver is None
    if own_solver:
        solver = InnerSolver(game, gamma=gamma, threads=threads)
        if not solver.report_monotone.strongly_monotone:
            log.warning("pseudo-gradient is not certified strongly monotone; the equilibrium may not be unique")
    c = project_discounts(np.zeros(game.m) if c0 is None else np.asarray(c0, dtype=float), upper,
                          problem.uniform, game.N)
    Y, S, inner = solver.run(c, Y0, S0, schedules.sigma(0))
    inner_its = inner.iterations
    alpha0 = schedules.alpha0
    best = None
    budget_ok = problem.budget * (1 + BUDGET_SLACK)
    stop = stop_tol * upper.max(initial=0.0)
    try:
        for k in range(max_iters + 1):
            t_step = time.perf_counter()
            f = ta_objective(game, c, Y, problem)
            spend = budget_spend(game, c, Y)
            report.c.append(c.copy())
            report.objective.append(f)
            report.spend.append(spend)
            report.ttt.append(ttt(game, aggregate_flow(game, Y), problem.edges))
            report.inner_iterations.append(inner_its)
            score = f - problem.mu * budget_penalty(spend, problem.budget)
            if spend <= budget_ok and (best is None or score < best[0]):
                best = (score, k, c.copy(), Y.copy(), S.copy(), f)
            grad = hypergradient(game, c, Y, S, problem)
            report.grad_norm.append(float(np.linalg.norm(grad)))
            if k == max_iters:
                report.step_time.append(time.perf_counter() - t_step)
                break
            direction = weights * grad
            if alpha0 is None:
                alpha0 = _backtrack(game, problem, solver, c, Y, direction, grad, upper, f, schedules.sigma(0))
            c_new = project_discounts(c - schedules.alpha(k, alpha0) * direction, upper, problem.uniform, game.N)
            Y, S, inner = solver.run(c_new, Y, S, schedules.sigma(k + 1))
            inner_its = inner.iterations
            step = float(np.abs(c_new - c).max(initial=0.0))
            c = c_new
            report.step_time.append(time.perf_counter() - t_step)
            if step <= stop:
                report.converged = True
                f = ta_objective(game, c, Y, problem)
                spend = budget_spend(game, c, Y)
                report.c.append(c.copy())
                report.objective.append(f)
                report.spend.append(spend)
                report.ttt.append(ttt(game, aggregate_flow(game, Y), problem.edges))
                report.inner_iterations.append(inner_its)
                report.grad_norm.append(float(np.linalg.norm(hypergradient(game, c, Y, S, problem))))
                report.step_time.append(0.0)
                score = f - problem.mu * budget_penalty(spend, problem.budget)
                if spend <= budget_ok and (best is None or score < best[0]):
                    best = (score, k + 1, c.copy(), Y.copy(), S.copy(), f)
                break
    finally:
        if own_solver:
            solver.close()

    report.alpha0 = float(alpha0 or 0.0)
    if best is None:
        # no iterate met the budget: report the last one
        best = (None, report.iterations - 1, c, Y, S, report.objective[-1])
    _, report.best_iteration, report.final_c, report.final_Y, report.final_S, report.final_objective = best
    report.final_ttt = ttt(game, aggregate_flow(game, report.final_Y), problem.edges)
    report.final_spend = budget_spend(game, report.final_c, report.final_Y)
    report.wall_time = time.perf_counter() - t0
    return report


def solve(game: Game, problem: TAProblem, schedules: Schedules = Schedules(), max_doublings: int = 20,
          threads: int = 1, **kw) -> SolveReport:
    """Outer loop with the penalty weight doubled until the last iterate respects the budget."""
    mu = problem.mu
    c0 = kw.pop("c0", None)
    solver = InnerSolver(game, gamma=kw.pop("gamma", None), threads=threads) if game.N else None
    t0 = time.perf_counter()
    try:
        for _ in range(max_doublings + 1):
            report = outer_loop(game, problem.with_(mu=mu), schedules, c0=c0, solver=solver, **kw)
            if report.spend[-1] <= problem.budget * (1 + BUDGET_SLACK):
                break
            log.info("last spend %.6g exceeds budget %.6g; doubling penalty weight to %.3g",
                     report.spend[-1], problem.budget, 2 * mu)
            mu *= 2
    finally:
        if solver is not None:
            solver.close()
    report.wall_time = time.perf_counter() - t0
    return report
