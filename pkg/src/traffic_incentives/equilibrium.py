"""Inner fixed-point loop: Nash equilibrium of the agents and its sensitivity.

Every agent repeatedly takes a projected pseudo-gradient step against the
broadcast aggregate flow, and propagates the derivative of its strategy with
respect to the discounts through the same step.
"""
from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .agents import (Game, MonotonicityReport, agent_cost, agent_gradient, aggregate_flow, aggregate_sensitivity,
                     monotonicity_certificate, step_size)
from .projection import JacobianFactors, ProjectionWorkspace, jacobian_factors, project

DIVERGENCE_PATIENCE = 50


class DivergenceError(RuntimeError):
    """The fixed-point residual kept growing; the step size is likely too large."""


@dataclass
class InnerReport:
    iterations: int
    residual: float
    residual_y: float
    residual_s: float
    refreshes: int
    wall_time: float
    converged: bool
    trace: list = field(default_factory=list, repr=False)
    slowest_agent_time: float = 0.0  # summed over iterations

    @property
    def time_per_iteration(self) -> float:
        return self.wall_time / max(self.iterations, 1)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual_y", "residual_s", "zeta"])
            w.writerows(self.trace)


class InnerSolver:
    """Reusable inner-loop state for one game.

    Keeps one projection workspace per agent so consecutive calls (for
    instance across outer iterations) are warm started. With ``threads > 1``
    the per-agent updates of one iteration run in a thread pool; the
    aggregates are always reduced in agent order, so results do not depend
    on the thread count.
    """

    def __init__(self, game: Game, gamma: float | None = None, step_rule: str = "optimal",
                 proj_tol: float = 1e-11, threads: int = 1):
        self.game = game
        self.report_monotone: MonotonicityReport = monotonicity_certificate(game)[1]
        self.gamma = float(gamma) if gamma is not None else step_size(self.report_monotone, step_rule)
        if not self.gamma > 0:
            raise ValueError("step size must be positive")
        self.proj_tol = proj_tol
        self.threads = max(1, int(threads))
        self.workspaces = [ProjectionWorkspace(p) for p in game.polyhedra]
        self._factors: list[JacobianFactors | None] = [None] * game.N
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        self.agent_times = np.zeros(game.N)
        self._prepare_constants()

    def _prepare_constants(self):
        g, net = self.game, self.game.network
        self._phi_own = (g.eta * g.P ** 2)[:, None] * net.b[None]
        self._phi_sigma = (g.eta * g.P)[:, None] * net.b[None]
        self._lm = 2 * g.eta[:, None] * g.W

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def initial_profile(self) -> np.ndarray:
        return self.game.uniform_profile()

    # one agent ---------------------------------------------------------------
    def _agent_step(self, i, c, y, s, sigma, sigma_s, refresh, with_s):
        t0 = time.perf_counter()
        g = self.game
        net = g.network
        gamma = self.gamma
        F = agent_gradient(g, i, c, y, sigma)
        res = project(g.polyhedra[i], y - gamma * F, tol=self.proj_tol, workspace=self.workspaces[i])
        s_new = None
        if with_s:
            if refresh or self._factors[i] is None:
                self._factors[i] = jacobian_factors(g.polyhedra[i], res, workspace=self.workspaces[i])
            # t = (I - gamma J_own) s - gamma J_sigma sigma_s - gamma J_c
            t = s.copy()
            ph, gc, gp = g.phi, g.gc, g.gp
            t[ph] -= gamma * (self._phi_own[i][:, None] * s[ph] + self._phi_sigma[i][:, None] * sigma_s)
            lm = gamma * self._lm[i][:, None] * (s[gc] + s[gp])
            t[gc] -= lm
            t[gp] -= lm
            base = i * g.n_disc
            t[net.n_e + net.charge_idx, base + np.arange(net.n_c)] += gamma * g.q[i]
            t[net.n_e + net.n_v + net.park_idx, base + net.n_c + np.arange(net.n_p)] += gamma
            s_new = self._factors[i].apply(t)
        self.agent_times[i] = time.perf_counter() - t0
        return res.point, s_new

    # full loop ---------------------------------------------------------------
    def run(self, c: np.ndarray, Y0: np.ndarray | None = None, S0: np.ndarray | None = None, tol: float = 1e-6,
            max_iters: int = 20000, compute_sensitivity: bool = True, record_trace: bool = False):
        """Iterate to a fixed point; returns ``(Y, S, report)`` (``S`` is None without sensitivities)."""
        g = self.game
        c = np.asarray(c, dtype=float).reshape(g.m)
        t_start = time.perf_counter()
        Y = g.check_profile(self.initial_profile() if Y0 is None else np.array(Y0, dtype=float))
        if np.any(Y < -1e-12) or np.any(Y > 1 + 1e-12):
            raise ValueError("initial profile must lie in [0, 1]")
        S = None
        if compute_sensitivity:
            S = np.zeros((g.N, g.n_i, g.m)) if S0 is None else np.array(S0, dtype=float).reshape(g.N, g.n_i, g.m)
        zeta = True  # refresh at the first iteration
        refreshes = 0
        prev_res, growth = np.inf, 0
        trace = []
        ry = rs = np.inf
        slowest = 0.0
        it = 0
        converged = False
        for it in range(1, max_iters + 1):
            sigma = aggregate_flow(g, Y)
            sigma_s = aggregate_sensitivity(g, S) if compute_sensitivity else None
            refresh = zeta and compute_sensitivity
            refreshes += int(refresh)
            args = [(i, c, Y[i], None if S is None else S[i], sigma, sigma_s, refresh, compute_sensitivity)
                    for i in range(g.N)]
            if self._pool is not None:
                out = list(self._pool.map(lambda a: self._agent_step(*a), args))
            else:
                out = [self._agent_step(*a) for a in args]
            slowest += float(self.agent_times.max(initial=0.0))
            Y_new = np.array([o[0] for o in out]).reshape(g.N, g.n_i)
            ry = float(np.linalg.norm(Y_new - Y))
            if compute_sensitivity:
                S_new = np.array([o[1] for o in out])
                rs = float(np.linalg.norm(S_new - S))
                S = S_new
            else:
                rs = 0.0
            Y = Y_new
            zeta = ry >= tol
            if record_trace:
                trace.append((it, ry, rs, int(zeta)))
            res = max(ry, rs)
            if res <= tol:
                converged = True
                break
            # a contraction shrinks the residual every step; a plateau is an oscillation
            growth = growth + 1 if res >= prev_res * (1 - 1e-9) else 0
            prev_res = res
            if growth >= DIVERGENCE_PATIENCE or not np.isfinite(res):
                raise DivergenceError(
                    f"inner residual failed to shrink for {DIVERGENCE_PATIENCE} consecutive iterations "
                    f"(residual {res:.3e}); use a smaller step size than {self.gamma:.3e}")
        report = InnerReport(it, max(ry, rs), ry, rs, refreshes, time.perf_counter() - t_start, converged, trace,
                             slowest)
        return Y, S, report


def inner_loop(game: Game, c: np.ndarray, Y0: np.ndarray | None = None, S0: np.ndarray | None = None,
               tol: float = 1e-6, gamma: float | None = None, max_iters: int = 20000,
               compute_sensitivity: bool = True, threads: int = 1, record_trace: bool = False):
    """One-shot wrapper around :class:`InnerSolver`; returns ``(Y, S, report)``."""
    solver = InnerSolver(game, gamma=gamma, threads=threads)
    try:
        return solver.run(c, Y0, S0, tol, max_iters, compute_sensitivity, record_trace)
    finally:
        solver.close()


# ---------------------------------------------------------------------------
# Equilibrium verification
# ---------------------------------------------------------------------------

@dataclass
class NEVerification:
    ok: bool
    worst_violation: float
    vi_gaps: np.ndarray
    br_gaps: np.ndarray


def _lp_min(poly, f):
    res = linprog(f, A_ub=poly.A_in if len(poly.A_in) else None, b_ub=poly.b_in if len(poly.A_in) else None,
                  A_eq=poly.A_eq, b_eq=poly.b_eq, bounds=list(zip(poly.lower, poly.upper)), method="highs")
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    return res.x


def best_response(game: Game, i: int, c: np.ndarray, Y: np.ndarray, max_iter: int = 5000,
                  tol: float = 1e-12) -> np.ndarray:
    """Minimizer of agent ``i``'s cost with the other agents fixed (accelerated projected gradient)."""
    net = game.network
    sigma_rest = aggregate_flow(game, Y) - game.P[i] * Y[i, game.phi]
    poly = game.polyhedra[i]
    ws = ProjectionWorkspace(poly)
    L = max(2 * game.eta[i] * game.P[i] ** 2 * net.b.max(initial=0.0), 4 * game.eta[i] * game.W[i].max(), 1e-12)

    def grad(y):
        # own flow enters the aggregate, hence the doubled congestion term
        return agent_gradient(game, i, c, y, sigma_rest + game.P[i] * y[game.phi])

    x = Y[i].copy()
    v = x.copy()
    tk = 1.0
    for _ in range(max_iter):
        x_new = project(poly, v - grad(v) / L, workspace=ws).point
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * tk ** 2))
        v = x_new + ((tk - 1) / t_new) * (x_new - x)
        step = np.linalg.norm(x_new - x)
        x, tk = x_new, t_new
        if step <= tol:
            break
    return x


def verify_ne(game: Game, c: np.ndarray, Y: np.ndarray, tol: float = 1e-6) -> NEVerification:
    """Check the equilibrium conditions agent by agent.

    The VI gap is ``F_i^T (y_i - argmin_{Y_i} F_i^T y)`` from a linear
    program; the best-response gap is the cost decrease available to a
    unilateral deviation. ``ok`` requires every VI gap to be at most ``tol``.
    """
    Y = game.check_profile(Y)
    c = np.asarray(c, dtype=float)
    sigma = aggregate_flow(game, Y)
    vi = np.zeros(game.N)
    br = np.zeros(game.N)
    for i in range(game.N):
        F = agent_gradient(game, i, c, Y[i], sigma)
        y_lp = _lp_min(game.polyhedra[i], F)
        vi[i] = max(float(F @ (Y[i] - y_lp)), 0.0)
        y_br = best_response(game, i, c, Y)
        sigma_br = sigma + game.P[i] * (y_br[game.phi] - Y[i, game.phi])
        br[i] = max(agent_cost(game, i, c, Y[i], sigma) - agent_cost(game, i, c, y_br, sigma_br), 0.0)
    worst = float(vi.max(initial=0.0))
    return NEVerification(worst <= tol, worst, vi, br)
