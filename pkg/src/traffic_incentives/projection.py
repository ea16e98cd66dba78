"""Euclidean projection onto polyhedra and its derivative.

A polyhedron is ``{y : A_eq y = b_eq, A_in y <= b_in, lower <= y <= upper}``.
Projections are computed by an operator-splitting (ADMM) pass followed by an
active-set polish, or, when a previous solution is available, by a primal
active-set method started from it. The derivative of the projection at a
point is the orthogonal projector onto the null space of the active rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog, lsq_linear

# active-set classification, see ActiveSet
SLACK_TOL = 1e-6
DUAL_TOL = 1e-6
RANK_TOL = 1e-9


class EmptyPolyhedronError(ValueError):
    """Raised when the constraint set has no feasible point."""


class ProjectionConvergenceError(RuntimeError):
    def __init__(self, message: str, best_residual: float):
        super().__init__(f"{message} (best KKT residual {best_residual:.3e})")
        self.best_residual = best_residual


class NumericalRankError(RuntimeError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True, eq=False)
class Polyhedron:
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    feasible_point: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n = len(self.lower)
        A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
        A_in = np.asarray(self.A_in, dtype=float).reshape(-1, n)
        object.__setattr__(self, "A_eq", A_eq)
        object.__setattr__(self, "A_in", A_in)
        object.__setattr__(self, "b_eq", np.asarray(self.b_eq, dtype=float).reshape(len(A_eq)))
        object.__setattr__(self, "b_in", np.asarray(self.b_in, dtype=float).reshape(len(A_in)))
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.upper.shape != (n,) or np.any(self.lower > self.upper):
            raise EmptyPolyhedronError("box bounds are inconsistent")
        if self.feasible_point is None:
            object.__setattr__(self, "feasible_point", self._certify())
        else:
            object.__setattr__(self, "feasible_point", np.asarray(self.feasible_point, dtype=float))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def rhs_scale(self) -> float:
        parts = [np.abs(self.b_eq), np.abs(self.b_in), np.abs(self.upper[np.isfinite(self.upper)])]
        return 1.0 + max((float(p.max()) for p in parts if p.size), default=0.0)

    def _certify(self) -> np.ndarray:
        res = linprog(
            np.zeros(self.dim),
            A_ub=self.A_in if len(self.A_in) else None, b_ub=self.b_in if len(self.A_in) else None,
            A_eq=self.A_eq if len(self.A_eq) else None, b_eq=self.b_eq if len(self.A_eq) else None,
            bounds=list(zip(self.lower, self.upper)), method="highs",
        )
        if res.status != 0:
            raise EmptyPolyhedronError(f"constraint set is empty: {res.message}")
        return np.clip(res.x, self.lower, self.upper)

    def violation(self, y: np.ndarray) -> float:
        parts = [0.0]
        if len(self.A_eq):
            parts.append(np.abs(self.A_eq @ y - self.b_eq).max())
        if len(self.A_in):
            parts.append(np.maximum(self.A_in @ y - self.b_in, 0).max())
        parts.append(np.maximum(self.lower - y, 0).max())
        parts.append(np.maximum(y - self.upper, 0).max())
        return float(max(parts))

    def contains(self, y: np.ndarray, tol: float = 1e-9) -> bool:
        return self.violation(y) <= tol


@dataclass
class ActiveSet:
    """Constraints treated as binding.

    ``inequality`` indexes rows of ``A_in``; ``lower``/``upper`` index box
    faces. ``margins`` holds the slacks of the classified-active constraints.
    """

    inequality: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    margins: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def key(self) -> tuple:
        return (tuple(self.inequality.tolist()), tuple(self.lower.tolist()), tuple(self.upper.tolist()))


@dataclass
class ProjectionResult:
    point: np.ndarray
    eq_duals: np.ndarray
    in_duals: np.ndarray
    lower_duals: np.ndarray
    upper_duals: np.ndarray
    kkt_residual: float
    iterations: int = 0
    method: str = ""
    # final working set (inequality rows, lower faces, upper faces) as boolean masks, for warm starts
    working: tuple | None = field(default=None, repr=False)


def classify_active(poly: Polyhedron, y: np.ndarray, slack_tol: float | None = None) -> ActiveSet:
    """Slack-based classification; weakly active constraints count as active."""
    tol = SLACK_TOL * poly.rhs_scale if slack_tol is None else slack_tol
    s_in = poly.b_in - poly.A_in @ y if len(poly.A_in) else np.zeros(0)
    s_lo = y - poly.lower
    s_up = poly.upper - y
    ineq = np.flatnonzero(s_in <= tol)
    lo = np.flatnonzero(s_lo <= tol)
    up = np.flatnonzero(s_up <= tol)
    return ActiveSet(ineq, lo, up, np.concatenate([s_in[ineq], s_lo[lo], s_up[up]]))


# ---------------------------------------------------------------------------
# Equality-constrained subproblem on a working set
# ---------------------------------------------------------------------------

class _EqualityProjector:
    """Projection onto ``{y : rows(W) y = rhs(W)}`` with box-fixed coordinates eliminated."""

    def __init__(self, poly: Polyhedron, ineq: np.ndarray, fixed: np.ndarray):
        n = poly.dim
        self.fixed = fixed
        free = np.ones(n, dtype=bool)
        free[fixed] = False
        self.free = np.flatnonzero(free)
        self.ineq = ineq
        rows = np.vstack([poly.A_eq, poly.A_in[ineq]]) if len(ineq) else poly.A_eq
        self.rows = rows
        E = rows[:, self.free]
        self.n_rows = len(rows)
        if E.size == 0 or len(self.free) == 0:
            self.rank = 0
            self.Q = np.zeros((len(self.free), 0))
            self.R11 = np.zeros((0, 0))
            self.R11_inv = self.R11
            self.piv = np.arange(self.n_rows)
            return
        # rank-revealing QR of E^T: E^T[:, piv] = Q R
        Q, R, piv = sla.qr(E.T, mode="economic", pivoting=True, check_finite=False)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > RANK_TOL * diag[0])) if diag.size and diag[0] > 0 else 0
        self.rank = rank
        self.Q = Q[:, :rank]
        self.R11 = R[:rank, :rank]
        # small and well conditioned after pivoting; an explicit inverse is cheaper than triangular solves
        self.R11_inv = sla.solve_triangular(self.R11, np.eye(rank), check_finite=False) if rank else np.zeros((0, 0))
        self.piv = piv

    def solve(self, poly: Polyhedron, z: np.ndarray, fixed_values: np.ndarray):
        """Return the projection of ``z`` and the row multipliers (length n_rows)."""
        y = np.empty_like(z)
        y[self.fixed] = fixed_values
        rhs = np.concatenate([poly.b_eq, poly.b_in[self.ineq]]) if len(self.ineq) else poly.b_eq.copy()
        rhs = rhs - self.rows[:, self.fixed] @ fixed_values
        lam = np.zeros(self.n_rows)
        zf = z[self.free]
        if self.rank == 0:
            y[self.free] = zf
            consistency = np.abs(rhs).max() if rhs.size else 0.0
            return y, lam, consistency
        basic = self.piv[: self.rank]
        w = self.R11_inv.T @ rhs[basic]
        t = self.Q.T @ zf - w
        y[self.free] = zf - self.Q @ t
        lam[basic] = self.R11_inv @ t
        return y, lam, 0.0

    def null_projector(self) -> np.ndarray:
        return np.eye(len(self.free)) - self.Q @ self.Q.T


def _kkt(poly: Polyhedron, z, y, lam_eq, lam_in, mu_lo, mu_up) -> float:
    grad = y - z + poly.A_eq.T @ lam_eq + poly.A_in.T @ lam_in - mu_lo + mu_up
    s_in = poly.b_in - poly.A_in @ y if len(poly.A_in) else np.zeros(0)
    with np.errstate(invalid="ignore"):
        # zero multipliers on infinite bounds give nan, which counts as satisfied
        comp = [np.abs(lam_in * s_in), np.abs(mu_lo * (y - poly.lower)), np.abs(mu_up * (poly.upper - y))]
    comp = [np.where(np.isfinite(c), c, 0.0) for c in comp]
    negative = [np.maximum(-lam_in, 0), np.maximum(-mu_lo, 0), np.maximum(-mu_up, 0)]
    parts = [np.abs(grad).max(initial=0.0), poly.violation(y)]
    parts += [c.max(initial=0.0) for c in comp] + [n.max(initial=0.0) for n in negative]
    return float(max(parts))


def _split_box_duals(poly, z, y, lam_eq, lam_in, lower_set, upper_set):
    """Box multipliers from stationarity on the fixed coordinates."""
    resid = z - y - poly.A_eq.T @ lam_eq - poly.A_in.T @ lam_in
    mu_lo = np.zeros(poly.dim)
    mu_up = np.zeros(poly.dim)
    pinned = np.intersect1d(lower_set, upper_set)
    mu_up[upper_set] = resid[upper_set]
    mu_lo[lower_set] = -resid[lower_set]
    # pinned coordinates (lower == upper) absorb either sign
    mu_up[pinned] = np.maximum(resid[pinned], 0)
    mu_lo[pinned] = np.maximum(-resid[pinned], 0)
    return mu_lo, mu_up


# ---------------------------------------------------------------------------
# Primal active-set method (warm start)
# ---------------------------------------------------------------------------

class ProjectionWorkspace:
    """Per-polyhedron reusable state: last solution and factorization cache.

    Not safe for concurrent use; give each worker its own workspace.
    """

    def __init__(self, poly: Polyhedron, cache_size: int = 64):
        self.poly = poly
        self.last: ProjectionResult | None = None
        self._cache: dict[tuple, _EqualityProjector] = {}
        self._cache_size = cache_size
        self._admm: _AdmmSolver | None = None
        self.pinned = poly.lower == poly.upper

    def projector(self, ineq: np.ndarray, fixed: np.ndarray) -> _EqualityProjector:
        key = (tuple(ineq.tolist()), tuple(fixed.tolist()))
        proj = self._cache.pop(key, None)
        if proj is not None:
            self._cache[key] = proj  # most recently used goes last
        else:
            proj = _EqualityProjector(self.poly, ineq, fixed)
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = proj
        return proj

    def admm(self) -> "_AdmmSolver":
        if self._admm is None:
            self._admm = _AdmmSolver(self.poly)
        return self._admm


def _active_set_method(poly: Polyhedron, z: np.ndarray, y0: np.ndarray, work_in: np.ndarray, work_lo: np.ndarray,
                       work_up: np.ndarray, ws: ProjectionWorkspace, tol: float, max_iter: int):
    """Primal active-set iterations from the feasible point ``y0``.

    The working sets are boolean masks over inequality rows and box faces;
    pinned coordinates (``lower == upper``) are always fixed.
    """
    pinned = ws.pinned
    y = y0.copy()
    work_in, work_lo, work_up = work_in.copy(), work_lo & ~pinned, work_up & ~pinned & ~work_lo
    n_eq, n_in = len(poly.A_eq), len(poly.A_in)
    seen = set()
    for it in range(1, max_iter + 1):
        ineq = np.flatnonzero(work_in)
        fixed_mask = pinned | work_lo | work_up
        fixed = np.flatnonzero(fixed_mask)
        fixed_vals = np.where(work_up[fixed], poly.upper[fixed], poly.lower[fixed])
        eqp = ws.projector(ineq, fixed)
        target, lam, _ = eqp.solve(poly, z, fixed_vals)
        step = target - y

        # ratio test against constraints outside the working set
        alpha, block = 1.0, None
        if n_in:
            d = poly.A_in @ step
            mask = ~work_in & (d > 1e-14)
            if mask.any():
                j, r = _min_ratio(poly.b_in - poly.A_in @ y, d, mask)
                if r < alpha:
                    alpha, block = r, ("in", j)
        free = ~fixed_mask
        mask = free & (step < -1e-14)
        if mask.any():
            j, r = _min_ratio(y - poly.lower, -step, mask)
            if r < alpha:
                alpha, block = r, ("lo", j)
        mask = free & (step > 1e-14)
        if mask.any():
            j, r = _min_ratio(poly.upper - y, step, mask)
            if r < alpha:
                alpha, block = r, ("up", j)
        if block is not None:
            y = y + alpha * step
            kind, k = block
            if kind == "in":
                work_in[k] = True
            elif kind == "lo":
                work_lo[k] = True
                y[k] = poly.lower[k]
            else:
                work_up[k] = True
                y[k] = poly.upper[k]
            continue

        # full step taken: y is the minimizer on the working set, check multipliers
        y = target
        lam_eq = lam[:n_eq]
        lam_in = np.zeros(len(poly.A_in))
        lam_in[ineq] = lam[n_eq:]
        resid = z - y - poly.A_eq.T @ lam_eq
        if len(poly.A_in):
            resid -= poly.A_in.T @ lam_in
        mu_lo = np.zeros(poly.dim)
        mu_up = np.zeros(poly.dim)
        mu_lo[work_lo] = -resid[work_lo]
        mu_up[work_up] = resid[work_up]
        mu_lo[pinned] = np.maximum(-resid[pinned], 0)
        mu_up[pinned] = np.maximum(resid[pinned], 0)
        cands = [(lam_in, work_in, "in"), (mu_lo, work_lo, "lo"), (mu_up, work_up, "up")]
        if all(vals[mask].min(initial=0.0) >= -tol for vals, mask, _ in cands):
            res = ProjectionResult(y, lam_eq, lam_in, mu_lo, mu_up, 0.0, it, "active-set",
                                   (work_in, work_lo, work_up))
            res.kkt_residual = _kkt(poly, z, y, lam_eq, lam_in, mu_lo, mu_up)
            return res
        key = (work_in.tobytes(), work_lo.tobytes(), work_up.tobytes())
        if key in seen:
            # a repeated working set means dependent rows with non-unique multipliers;
            # look for a sign-feasible choice, otherwise the caller falls back to ADMM
            dual = _nonneg_multipliers(poly, z, y, work_in, work_lo, work_up, pinned)
            if dual is not None and _kkt(poly, z, y, *dual) <= tol * max(1.0, float(np.abs(z).max(initial=0.0))):
                res = ProjectionResult(y, *dual, 0.0, it, "active-set", (work_in, work_lo, work_up))
                res.kkt_residual = _kkt(poly, z, y, *dual)
                return res
            return None
        seen.add(key)
        # Bland's rule: release the lowest-numbered constraint with a negative multiplier
        release = None
        for vals, mask, kind in cands:
            neg = np.flatnonzero(mask & (vals < -tol))
            if neg.size:
                release = (kind, int(neg[0]))
                break
        kind, k = release
        {"in": work_in, "lo": work_lo, "up": work_up}[kind][k] = False
    return None


def _min_ratio(slack, rate, mask):
    """Index and value of the smallest ``max(slack, 0) / rate`` over ``mask`` (first index on ties)."""
    ratios = np.full(len(rate), np.inf)
    np.divide(np.maximum(slack, 0), rate, out=ratios, where=mask)
    j = int(np.argmin(ratios))
    return j, ratios[j]


def _nonneg_multipliers(poly, z, y, work_in, work_lo, work_up, pinned):
    """Multipliers on the working set with the sign constraints enforced, by bounded least squares."""
    n = poly.dim
    ineq = np.flatnonzero(work_in)
    lo = np.flatnonzero(work_lo | pinned)
    up = np.flatnonzero(work_up | pinned)
    n_eq = len(poly.A_eq)
    cols = [poly.A_eq.T, poly.A_in[ineq].T, -np.eye(n)[:, lo], np.eye(n)[:, up]]
    E = np.hstack(cols)
    if E.shape[1] == 0:
        return None
    lb = np.concatenate([np.full(n_eq, -np.inf), np.zeros(E.shape[1] - n_eq)])
    sol = lsq_linear(E, z - y, bounds=(lb, np.full(E.shape[1], np.inf)), method="bvls", tol=1e-14)
    v = sol.x
    lam_eq = v[:n_eq]
    lam_in = np.zeros(len(poly.A_in))
    lam_in[ineq] = v[n_eq:n_eq + len(ineq)]
    mu_lo = np.zeros(n)
    mu_up = np.zeros(n)
    k = n_eq + len(ineq)
    mu_lo[lo] = v[k:k + len(lo)]
    mu_up[up] = v[k + len(lo):]
    return lam_eq, lam_in, mu_lo, mu_up


def _working_set(poly: Polyhedron, y: np.ndarray, tol: float):
    s_in = poly.b_in - poly.A_in @ y if len(poly.A_in) else np.zeros(0)
    return s_in <= tol, y - poly.lower <= tol, poly.upper - y <= tol


# ---------------------------------------------------------------------------
# ADMM (cold start)
# ---------------------------------------------------------------------------

class _AdmmSolver:
    """OSQP-style splitting for ``min 0.5||y - z||^2  s.t.  l <= K y <= u``."""

    def __init__(self, poly: Polyhedron, rho: float = 0.1, sigma: float = 1e-6, relax: float = 1.6):
        n = poly.dim
        self.K = sp.vstack([sp.csr_matrix(poly.A_eq), sp.csr_matrix(poly.A_in), sp.identity(n)]).tocsc()
        self.l = np.concatenate([poly.b_eq, np.full(len(poly.b_in), -np.inf), poly.lower])
        self.u = np.concatenate([poly.b_eq, poly.b_in, poly.upper])
        self.is_eq = np.abs(self.u - self.l) < 1e-12
        self.n, self.sigma, self.relax = n, sigma, relax
        self.n_eq, self.n_in = len(poly.b_eq), len(poly.b_in)
        self._set_rho(rho)
        self.x = np.zeros(n)
        self.zk = np.zeros(self.K.shape[0])
        self.yk = np.zeros(self.K.shape[0])

    def _set_rho(self, rho: float):
        self.rho = rho
        self.rho_vec = np.where(self.is_eq, 1e3 * rho, rho)
        mat = (1.0 + self.sigma) * sp.identity(self.n) + self.K.T @ sp.diags(self.rho_vec) @ self.K
        self.lu = spla.splu(mat.tocsc())

    def solve(self, z: np.ndarray, eps: float, max_iter: int, x0=None):
        K, l, u = self.K, self.l, self.u
        if x0 is not None:
            self.x = x0.copy()
            self.zk = np.clip(K @ x0, l, u)
        x, zk, yk = self.x, self.zk, self.yk
        for it in range(1, max_iter + 1):
            rhs = self.sigma * x + z + K.T @ (self.rho_vec * zk - yk)
            x_t = self.lu.solve(rhs)
            z_t = K @ x_t
            x = self.relax * x_t + (1 - self.relax) * x
            z_relaxed = self.relax * z_t + (1 - self.relax) * zk
            zk = np.clip(z_relaxed + yk / self.rho_vec, l, u)
            yk = yk + self.rho_vec * (z_relaxed - zk)
            if it % 10 == 0:
                Kx = K @ x
                r_prim = np.abs(Kx - zk).max()
                r_dual = np.abs(x - z + K.T @ yk).max()
                scale_p = max(np.abs(Kx).max(), np.abs(zk).max(), 1.0)
                scale_d = max(np.abs(x).max(), np.abs(z).max(), np.abs(K.T @ yk).max(), 1.0)
                if r_prim <= eps * scale_p and r_dual <= eps * scale_d:
                    break
                # residual balancing as in OSQP
                ratio = np.sqrt((r_prim / scale_p) / max(r_dual / scale_d, 1e-30))
                if it % 50 == 0 and (ratio > 5 or ratio < 0.2):
                    self._set_rho(float(np.clip(self.rho * ratio, 1e-6, 1e6)))
        self.x, self.zk, self.yk = x, zk, yk
        return x, zk, yk, it

    def guess_active(self, poly: Polyhedron):
        """Polishing guess: lower/upper active where ``z - l < -y`` / ``u - z < y``."""
        zk, yk = self.zk, self.yk
        sl = slice(self.n_eq, self.n_eq + self.n_in)
        sb = slice(self.n_eq + self.n_in, None)
        in_act = np.flatnonzero((self.u[sl] - zk[sl]) < yk[sl])
        lo = np.flatnonzero((zk[sb] - self.l[sb]) < -yk[sb])
        up = np.flatnonzero((self.u[sb] - zk[sb]) < yk[sb])
        pinned = np.flatnonzero(poly.lower == poly.upper)
        return in_act, np.union1d(lo, pinned), np.union1d(up, pinned)


def _polish(poly, z, ws, in_act, lo, up, tol):
    fixed = np.union1d(lo, up)
    vals = np.where(np.isin(fixed, lo), poly.lower[fixed], poly.upper[fixed])
    eqp = ws.projector(np.asarray(in_act, dtype=np.int64), fixed.astype(np.int64))
    y, lam, _ = eqp.solve(poly, z, vals)
    n_eq = len(poly.A_eq)
    lam_eq = lam[:n_eq]
    lam_in = np.zeros(len(poly.A_in))
    lam_in[in_act] = lam[n_eq:]
    mu_lo, mu_up = _split_box_duals(poly, z, y, lam_eq, lam_in, lo, up)
    work_in = np.zeros(len(poly.A_in), dtype=bool)
    work_in[np.asarray(in_act, dtype=np.int64)] = True
    work_lo = np.zeros(poly.dim, dtype=bool)
    work_lo[lo] = True
    work_up = np.zeros(poly.dim, dtype=bool)
    work_up[up] = True
    working = (work_in, work_lo & ~ws.pinned, work_up & ~ws.pinned)
    res = ProjectionResult(y, lam_eq, lam_in, mu_lo, mu_up, 0.0, 0, "admm+polish", working)
    res.kkt_residual = _kkt(poly, z, y, lam_eq, lam_in, mu_lo, mu_up)
    if res.kkt_residual > tol * max(poly.rhs_scale, float(np.abs(z).max(initial=0.0))):
        dual = _nonneg_multipliers(poly, z, y, work_in, work_lo, work_up, ws.pinned)
        if dual is not None:
            kkt = _kkt(poly, z, y, *dual)
            if kkt < res.kkt_residual:
                res = ProjectionResult(y, *dual, kkt, 0, "admm+polish", working)
    return res


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def project(poly: Polyhedron, z: np.ndarray, tol: float = 1e-9, workspace: ProjectionWorkspace | None = None,
            max_iter: int = 20000) -> ProjectionResult:
    """Euclidean projection of ``z`` onto ``poly`` with KKT multipliers.

    With a workspace holding a previous solution the primal active-set method
    is warm started from it; otherwise ADMM provides an active-set guess that
    is polished and, if the guess is wrong, repaired by the active-set method.
    """
    z = np.asarray(z, dtype=float)
    ws = workspace if workspace is not None else ProjectionWorkspace(poly)
    best = np.inf
    act_tol = max(tol, 1e-12)
    # residuals are judged relative to the data, including the point being projected
    scale = max(poly.rhs_scale, float(np.abs(z).max(initial=0.0)))

    if ws.last is not None:
        start = ws.last.point
        # the previous final working set omits bounds that are tight only because other rows force them,
        # which saves releasing them again one at a time
        working = ws.last.working or _working_set(poly, start, act_tol)
        res = _active_set_method(poly, z, start, *working, ws, tol, max(50, 4 * poly.dim))
        if res is not None and res.kkt_residual <= tol * scale:
            ws.last = res
            return res
        best = min(best, res.kkt_residual if res is not None else np.inf)

    admm = ws.admm()
    _, _, _, iters = admm.solve(z, eps=1e-7, max_iter=max_iter, x0=None if ws.last is None else ws.last.point)
    res = _polish(poly, z, ws, *admm.guess_active(poly), tol)
    res.iterations = iters
    if res.kkt_residual <= tol * scale:
        ws.last = res
        return res
    best = min(best, res.kkt_residual)

    # repair: active-set iterations from the nearest certified feasible point
    start = poly.feasible_point
    if poly.contains(res.point, act_tol):
        start = res.point
    res2 = _active_set_method(poly, z, start, *_working_set(poly, start, act_tol), ws, tol, 20 * poly.dim + 100)
    if res2 is not None and res2.kkt_residual <= tol * scale:
        res2.iterations += iters
        ws.last = res2
        return res2
    if res2 is not None:
        best = min(best, res2.kkt_residual)
    raise ProjectionConvergenceError("projection did not reach the requested tolerance", best)


def projection_jacobian(poly: Polyhedron, result: ProjectionResult, active: ActiveSet | None = None,
                        workspace: ProjectionWorkspace | None = None) -> np.ndarray:
    """Derivative of the projection w.r.t. its input at ``result``.

    ``I - E^T (E E^T)^+ E`` with ``E`` the equality rows plus all constraints
    classified active (weakly active ones included).
    """
    free, D_ff = jacobian_blocks(poly, result, active, workspace)
    D = np.zeros((poly.dim, poly.dim))
    D[np.ix_(free, free)] = D_ff
    return D


def jacobian_blocks(poly: Polyhedron, result: ProjectionResult, active: ActiveSet | None = None,
                    workspace: ProjectionWorkspace | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Compact form of :func:`projection_jacobian`: ``(free, D_ff)``.

    Coordinates on an active box face have zero rows and columns, so only the
    block over the remaining coordinates is stored.
    """
    fac = jacobian_factors(poly, result, active, workspace)
    return fac.free, np.eye(len(fac.free)) - fac.Q @ fac.Q.T


@dataclass
class JacobianFactors:
    """``D = P_free (I - Q Q^T) P_free^T``: the projection Jacobian in factored form."""

    dim: int
    free: np.ndarray
    Q: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        """``D @ X`` for a vector or matrix ``X`` with ``dim`` rows."""
        out = np.zeros_like(X, dtype=float)
        Xf = X[self.free]
        out[self.free] = Xf - self.Q @ (self.Q.T @ Xf) if self.Q.shape[1] else Xf
        return out

    def dense(self) -> np.ndarray:
        D = np.zeros((self.dim, self.dim))
        D[np.ix_(self.free, self.free)] = np.eye(len(self.free)) - self.Q @ self.Q.T
        return D


def jacobian_factors(poly: Polyhedron, result: ProjectionResult, active: ActiveSet | None = None,
                     workspace: ProjectionWorkspace | None = None) -> JacobianFactors:
    """Same selection as :func:`projection_jacobian`, returned in factored form."""
    if active is None:
        active = classify_active(poly, result.point)
    fixed = np.union1d(active.lower, active.upper).astype(np.int64)
    ineq = active.inequality.astype(np.int64)
    eqp = workspace.projector(ineq, fixed) if workspace is not None else _EqualityProjector(poly, ineq, fixed)
    if eqp.rank and not np.all(np.isfinite(eqp.R11)):
        raise NumericalRankError("non-finite factor in active-row QR", np.inf)
    return JacobianFactors(poly.dim, eqp.free, eqp.Q)


def step_jacobians(game, i: int, c: np.ndarray, y_i: np.ndarray, sigma: np.ndarray, gamma: float,
                   D: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial Jacobians of ``h_i = Proj[y_i - gamma F_i(c, y_i, sigma)]``.

    Returns ``(S1, S2, S3)`` w.r.t. the discounts, the agent's own strategy
    and the aggregate flow. ``D`` is the projection Jacobian at
    ``y_i - gamma F_i``. The partials of ``F_i`` are constant, so ``c``,
    ``y_i`` and ``sigma`` only enter through ``D``; they are checked for shape.
    """
    from .agents import discount_jacobian, own_jacobian, sigma_jacobian

    n_i, m, n_e = game.n_i, game.m, game.network.n_e
    if np.shape(D) != (n_i, n_i) or np.shape(y_i) != (n_i,) or np.shape(c) != (m,) or np.shape(sigma) != (n_e,):
        raise ValueError("dimension mismatch in step_jacobians")
    S1 = D @ (-gamma * discount_jacobian(game, i))
    S2 = D @ (np.eye(n_i) - gamma * own_jacobian(game, i))
    S3 = D @ (-gamma * sigma_jacobian(game, i))
    return S1, S2, S3
