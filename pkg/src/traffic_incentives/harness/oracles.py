"""Independent verification oracles.

These deliberately avoid the solver code paths they check: projections are
computed by a least-distance program (non-negative least squares) or by
enumerating active sets, equilibria by extragradient on the dense affine
map, and derivatives by central finite differences.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import lsq_linear

from ..agents import Game, full_jacobian, pseudo_gradient
from ..equilibrium import InnerSolver
from ..incentives import TAProblem, ta_objective
from ..projection import Polyhedron


class OracleFailure(RuntimeError):
    """The oracle did not reach its own accuracy target."""


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def fd_gradient(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = step
        g.flat[k] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def fd_jacobian(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; column ``k`` is the derivative along ``x_k``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = step
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * step))
    return np.array(cols).T


def fd_sensitivity(game: Game, c: np.ndarray, step: float = 1e-4, tol: float = 1e-11,
                   Y0: np.ndarray | None = None, gamma: float | None = None) -> np.ndarray:
    """Central differences of the equilibrium profile w.r.t. each discount, shape ``(N, n_i, m)``."""
    solver = InnerSolver(game, gamma=gamma)
    c = np.asarray(c, dtype=float)
    if Y0 is None:
        Y0, _, _ = solver.run(c, tol=tol, compute_sensitivity=False)
    out = np.zeros((game.N, game.n_i, game.m))
    for k in range(game.m):
        e = np.zeros(game.m)
        e[k] = step
        Yp, _, rp = solver.run(c + e, Y0, tol=tol, compute_sensitivity=False)
        Ym, _, rm = solver.run(c - e, Y0, tol=tol, compute_sensitivity=False)
        if not (rp.converged and rm.converged):
            raise OracleFailure("inner solve did not converge during finite differencing")
        out[:, :, k] = (Yp - Ym) / (2 * step)
    return out


def implicit_objective_fd(game: Game, problem: TAProblem, c: np.ndarray, step: float = 1e-4,
                          tol: float = 1e-11) -> np.ndarray:
    """Central differences of ``c -> objective(c, y*(c))``."""
    solver = InnerSolver(game)
    Y0, _, _ = solver.run(c, tol=tol, compute_sensitivity=False)

    def f(x):
        Y, _, _ = solver.run(x, Y0, tol=tol, compute_sensitivity=False)
        return ta_objective(game, x, Y, problem)

    return fd_gradient(f, np.asarray(c, dtype=float), step)


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def _stacked_inequalities(poly: Polyhedron):
    """All constraints as ``G y >= h`` (equalities twice, infinite bounds dropped)."""
    n = poly.dim
    I = np.eye(n)
    G = [poly.A_eq, -poly.A_eq, -poly.A_in, I, -I]
    h = [poly.b_eq, -poly.b_eq, -poly.b_in, poly.lower, -poly.upper]
    G = np.vstack([g.reshape(-1, n) for g in G])
    h = np.concatenate(h)
    keep = np.isfinite(h)
    return G[keep], h[keep]


def ldp_projection(poly: Polyhedron, z: np.ndarray) -> np.ndarray:
    """Projection via the least-distance program solved as a non-negative least-squares problem.

    Writing ``y = z + x``, minimize ``||x||`` subject to ``G x >= h - G z``;
    with ``E = [G^T; (h - G z)^T]`` and ``u = argmin_{u>=0} ||E u - e_{n+1}||``
    the solution is ``x = -r[:n] / r[n]`` for the residual ``r = E u - e_{n+1}``.
    """
    z = np.asarray(z, dtype=float)
    G, h = _stacked_inequalities(poly)
    rhs = h - G @ z
    n = poly.dim
    E = np.vstack([G.T, rhs[None, :]])
    f = np.zeros(n + 1)
    f[n] = 1.0
    # bounded-variable least squares; more reliable here than scipy's nnls
    u = lsq_linear(E, f, bounds=(0.0, np.inf), method="bvls", tol=1e-15, max_iter=50 * E.shape[1]).x
    r = E @ u - f
    if abs(r[n]) < 1e-14:
        raise OracleFailure("least-distance program reports an empty set")
    return z - r[:n] / r[n]


def enumerate_projection(poly: Polyhedron, z: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Brute force over every subset of inequality and box constraints (small problems only)."""
    z = np.asarray(z, dtype=float)
    n = poly.dim
    cons = [(poly.A_in[k], poly.b_in[k]) for k in range(len(poly.A_in))]
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        if np.isfinite(poly.upper[k]):
            cons.append((e, poly.upper[k]))
        if np.isfinite(poly.lower[k]):
            cons.append((-e, -poly.lower[k]))
    if len(cons) > 16:
        raise ValueError("too many constraints to enumerate")
    best, best_d = None, np.inf
    for r in range(len(cons) + 1):
        for subset in itertools.combinations(range(len(cons)), r):
            E = np.vstack([poly.A_eq] + [cons[s][0][None] for s in subset]) if subset or len(poly.A_eq) else np.zeros((0, n))
            w = np.concatenate([poly.b_eq, [cons[s][1] for s in subset]])
            if len(E):
                lam = np.linalg.lstsq(E @ E.T, E @ z - w, rcond=None)[0]
                x = z - E.T @ lam
                if np.abs(E @ x - w).max() > tol:
                    continue
            else:
                x = z.copy()
            if not poly.contains(x, tol):
                continue
            d = float(np.sum((x - z) ** 2))
            if d < best_d - 1e-15:
                best, best_d = x, d
    if best is None:
        raise OracleFailure("no feasible active set found")
    return best


# ---------------------------------------------------------------------------
# Equilibrium
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    profile: np.ndarray
    residual: float
    iterations: int
    best_response_move: float


def brute_force_ne(game: Game, c: np.ndarray, tol: float = 1e-9, max_iter: int = 200000,
                   Y0: np.ndarray | None = None) -> OracleResult:
    """Equilibrium of the affine variational inequality by extragradient.

    Uses the dense Jacobian for the step bound, the least-distance
    projection, and a constant step ``0.5 / ||J||``. Afterwards every agent's
    best response is computed by projected gradient from the returned point;
    at an equilibrium it does not move.
    """
    if game.N * game.n_i > 60:
        raise ValueError("brute-force oracle is limited to 60 variables")
    c = np.asarray(c, dtype=float)
    J = full_jacobian(game)
    L = float(np.linalg.norm(J, 2))
    tau = 0.5 / L if L > 0 else 1.0
    polys = game.polyhedra
    Y = np.array([p.feasible_point for p in polys]) if Y0 is None else np.array(Y0, dtype=float)

    def proj(Z):
        return np.array([ldp_projection(p, z) for p, z in zip(polys, Z)])

    res = np.inf
    for it in range(1, max_iter + 1):
        Yh = proj(Y - tau * pseudo_gradient(game, c, Y))
        Yn = proj(Y - tau * pseudo_gradient(game, c, Yh))
        res = float(np.linalg.norm(Yn - Y))
        Y = Yn
        if res <= tol * tau:
            break
    else:
        raise OracleFailure(f"extragradient stopped at residual {res:.3e}")
    # natural-map residual ||y - Proj(y - F(y))|| is the stationarity measure
    nat = float(np.linalg.norm(Y - proj(Y - pseudo_gradient(game, c, Y))))
    move = _best_response_move(game, c, Y, proj)
    return OracleResult(Y, nat, it, move)


def _best_response_move(game: Game, c, Y, proj, iters: int = 200) -> float:
    """Largest displacement of a best-response pass started at ``Y``."""
    worst = 0.0
    own = np.array([game.eta[i] * game.P[i] ** 2 for i in range(game.N)])
    for i in range(game.N):
        L = max(2 * own[i] * game.network.b.max(initial=0.0), 4 * game.eta[i] * game.W[i].max(), 1e-12)
        y = Y[i].copy()
        for _ in range(iters):
            Z = Y.copy()
            Z[i] = y
            step = y - pseudo_gradient(game, c, Z)[i] / L
            y_new = ldp_projection(game.polyhedra[i], step)
            if np.linalg.norm(y_new - y) < 1e-14:
                break
            y = y_new
        worst = max(worst, float(np.linalg.norm(y - Y[i])))
    return worst


# ---------------------------------------------------------------------------
# Smoothness of the equilibrium map
# ---------------------------------------------------------------------------

def kink_gap(game: Game, c: np.ndarray, step: float = 1e-4, tol: float = 1e-12,
             Y0: np.ndarray | None = None, gamma: float | None = None) -> float:
    """Largest disagreement between forward and backward difference quotients of ``y*(c)``.

    The equilibrium map is piecewise affine, so the gap is zero (up to solver
    noise) exactly when no piece boundary lies within ``step`` of ``c`` along
    any coordinate; a small value certifies the map is differentiable there.
    """
    solver = InnerSolver(game, gamma=gamma)
    c = np.asarray(c, dtype=float)
    Y, _, _ = solver.run(c, Y0, tol=tol, compute_sensitivity=False)
    worst = 0.0
    for k in range(game.m):
        e = np.zeros(game.m)
        e[k] = step
        Yp, _, _ = solver.run(c + e, Y, tol=tol, compute_sensitivity=False)
        Ym, _, _ = solver.run(c - e, Y, tol=tol, compute_sensitivity=False)
        worst = max(worst, float(np.abs((Yp - Y) - (Y - Ym)).max()) / step)
    return worst


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def grid_search(game: Game, problem: TAProblem, n: int = 101, tol: float = 1e-9,
                base: np.ndarray | None = None, coords: tuple[int, int] = (0, 1)):
    """Exhaustive search of the implicit objective over two discount coordinates.

    The other coordinates stay at ``base`` (zero by default). The grid is
    traversed in serpentine order so each equilibrium solve is warm started
    from a neighbouring one. Returns ``(best_value, best_c, values)``.
    """
    upper = problem.upper_bounds(game)
    base = np.zeros(game.m) if base is None else np.asarray(base, dtype=float)
    k1, k2 = coords
    g1 = np.linspace(0.0, upper[k1], n)
    g2 = np.linspace(0.0, upper[k2], n)
    solver = InnerSolver(game)
    values = np.zeros((n, n))
    Y = None
    for a in range(n):
        order = range(n) if a % 2 == 0 else range(n - 1, -1, -1)
        for b in order:
            c = base.copy()
            c[k1], c[k2] = g1[a], g2[b]
            Y, _, _ = solver.run(c, Y, tol=tol, compute_sensitivity=False)
            values[a, b] = ta_objective(game, c, Y, problem)
    a, b = np.unravel_index(np.argmin(values), values.shape)
    best_c = base.copy()
    best_c[k1], best_c[k2] = g1[a], g2[b]
    return float(values[a, b]), best_c, values
