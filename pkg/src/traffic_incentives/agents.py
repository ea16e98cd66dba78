"""Vehicle classes, their feasible sets, costs and the pseudo-gradient.

An agent's strategy is ``y_i = (phi, g_c, g_p)`` with ``phi`` the per-edge
flow fractions and ``g_c``/``g_p`` the per-node charging and parking
fractions. All agents share this layout (length ``n_e + 2 n_v``); coordinates
that cannot be used (charging for fuel vehicles, facilities absent at a node)
are pinned to zero through the box bounds.

Discounts are stacked per agent as ``[charging at charge nodes, parking at
park nodes]`` with nodes in index order, giving ``m = N (n_c + n_p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.optimize as sopt

from .network import RoadNetwork, free_flow_distances
from .projection import EmptyPolyhedronError, Polyhedron

DEFAULT_EPS_W = 1e-3


class VehicleKind(str, Enum):
    PEV = "pev"
    FV = "fv"


class InfeasibleAgentError(ValueError):
    """The constraints of an agent class admit no strategy."""


@dataclass(frozen=True, eq=False)
class AgentClass:
    """A population of identical vehicles.

    ``charge_slots``/``park_slots`` are per-facility caps (vehicles), aligned
    with the network's charge/park nodes in index order. ``weights`` is the
    diagonal last-mile weight over all nodes (hours); see
    :func:`lastmile_weights` for the default construction.
    """

    id: int
    kind: VehicleKind
    population: float
    origin: int
    destination: int
    value_of_time: float
    energy_demand: float
    min_charge: float
    charge_slots: np.ndarray
    park_slots: np.ndarray
    weights: np.ndarray
    eps_w: float = DEFAULT_EPS_W

    def __post_init__(self):
        object.__setattr__(self, "kind", VehicleKind(self.kind))
        for name in ("charge_slots", "park_slots", "weights"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.origin == self.destination:
            raise ValueError(f"agent {self.id}: origin equals destination")
        if self.population <= 0:
            raise ValueError(f"agent {self.id}: population must be positive")
        if self.value_of_time < 0 or self.energy_demand < 0:
            raise ValueError(f"agent {self.id}: value of time and energy demand must be non-negative")
        if not 0 <= self.min_charge <= 1:
            raise ValueError(f"agent {self.id}: minimum charge fraction outside [0, 1]")
        if self.kind is VehicleKind.FV and self.min_charge != 0:
            raise ValueError(f"agent {self.id}: fuel vehicles cannot have a minimum charge")
        if np.any(self.charge_slots <= 0) or np.any(self.park_slots <= 0):
            raise ValueError(f"agent {self.id}: slot caps must be positive")
        if self.eps_w <= 0 or np.any(self.weights <= 0):
            raise ValueError(f"agent {self.id}: last-mile weights must be positive")

    @property
    def is_pev(self) -> bool:
        return self.kind is VehicleKind.PEV


def lastmile_weights(network: RoadNetwork, destination: int, eps_w: float = DEFAULT_EPS_W,
                     distances: np.ndarray | None = None) -> np.ndarray:
    """Free-flow time from each facility to ``destination``; ``eps_w`` elsewhere and at the destination."""
    d = network.index(destination)
    if distances is None:
        distances = free_flow_distances(network, [destination])[:, 0]
    w = np.full(network.n_v, float(eps_w))
    fac = np.union1d(network.charge_idx, network.park_idx)
    w[fac] = distances[fac]
    w[d] = eps_w
    # a facility at zero free-flow distance from d would break positivity
    return np.maximum(w, eps_w)


def make_agent(network: RoadNetwork, id: int, kind, population: float, origin: int, destination: int,
               value_of_time: float, energy_demand: float = 0.0, min_charge: float = 0.0,
               charge_slots=None, park_slots=None, eps_w: float = DEFAULT_EPS_W,
               distances: np.ndarray | None = None) -> AgentClass:
    """Convenience constructor; slot caps default to the whole population."""
    charge_slots = np.full(network.n_c, population) if charge_slots is None else np.broadcast_to(charge_slots, (network.n_c,))
    park_slots = np.full(network.n_p, population) if park_slots is None else np.broadcast_to(park_slots, (network.n_p,))
    return AgentClass(id, VehicleKind(kind), population, origin, destination, value_of_time, energy_demand,
                      min_charge, charge_slots, park_slots,
                      lastmile_weights(network, destination, eps_w, distances), eps_w)


def build_feasible_polyhedron(agent: AgentClass, network: RoadNetwork) -> Polyhedron:
    """Constraint set of one agent: conservation, minimum charge, slot caps and box."""
    n_e, n_v = network.n_e, network.n_v
    n = n_e + 2 * n_v
    for label in (agent.origin, agent.destination):
        network.index(label)
    if agent.weights.shape != (n_v,):
        raise ValueError(f"agent {agent.id}: weights must have one entry per node")
    if agent.charge_slots.shape != (network.n_c,) or agent.park_slots.shape != (network.n_p,):
        raise ValueError(f"agent {agent.id}: slot caps must align with facility nodes")
    P = agent.population

    if agent.is_pev and agent.min_charge * P > np.minimum(agent.charge_slots, P).sum() + 1e-12:
        raise InfeasibleAgentError(
            f"agent {agent.id}: minimum charge {agent.min_charge * P:.6g} vehicles exceeds "
            f"charging capacity {agent.charge_slots.sum():.6g}")

    B = network.incidence()
    A_eq = np.hstack([B, -np.eye(n_v), -np.eye(n_v)])
    b_eq = np.zeros(n_v)
    b_eq[network.index(agent.origin)] = -1.0

    rows, rhs = [], []
    if agent.is_pev and agent.min_charge > 0:
        r = np.zeros(n)
        r[n_e:n_e + n_v] = -1.0
        rows.append(r)
        rhs.append(-agent.min_charge)
    if agent.is_pev:
        for j, cap in zip(network.charge_idx, agent.charge_slots):
            r = np.zeros(n)
            r[n_e + j] = P
            rows.append(r)
            rhs.append(cap)
    for j, cap in zip(network.park_idx, agent.park_slots):
        r = np.zeros(n)
        r[n_e + n_v + j] = P
        rows.append(r)
        rhs.append(cap)
    A_in = np.array(rows).reshape(-1, n)
    b_in = np.array(rhs)

    lower = np.zeros(n)
    upper = np.zeros(n)
    upper[:n_e] = 1.0
    if agent.is_pev:
        upper[n_e + network.charge_idx] = 1.0
    upper[n_e + n_v + network.park_idx] = 1.0
    try:
        return Polyhedron(A_eq, b_eq, A_in, b_in, lower, upper)
    except EmptyPolyhedronError as exc:
        raise InfeasibleAgentError(f"agent {agent.id}: feasible set is empty ({exc})") from exc


@dataclass(frozen=True, eq=False)
class Game:
    """The lower-level game: network, agent classes and facility base prices.

    ``charge_price``/``park_price`` are aligned with the charge/park nodes in
    index order.
    """

    network: RoadNetwork
    agents: tuple
    charge_price: np.ndarray
    park_price: np.ndarray
    polyhedra: tuple = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        net = self.network
        object.__setattr__(self, "agents", tuple(self.agents))
        cp = np.asarray(self.charge_price, dtype=float).reshape(net.n_c)
        pp = np.asarray(self.park_price, dtype=float).reshape(net.n_p)
        object.__setattr__(self, "charge_price", cp)
        object.__setattr__(self, "park_price", pp)
        if self.polyhedra is None:
            object.__setattr__(self, "polyhedra", tuple(build_feasible_polyhedron(a, net) for a in self.agents))
        A = self.agents
        n_v = net.n_v
        self._set("P", np.array([a.population for a in A], dtype=float))
        self._set("eta", np.array([a.value_of_time for a in A], dtype=float))
        self._set("q", np.array([a.energy_demand for a in A], dtype=float))
        self._set("W", np.array([a.weights for a in A], dtype=float).reshape(len(A), n_v))
        ghat = np.zeros((len(A), n_v))
        for i, a in enumerate(A):
            ghat[i, net.index(a.destination)] = 1.0
        self._set("ghat", ghat)
        cbar_c = np.zeros(n_v)
        cbar_c[net.charge_idx] = cp
        cbar_p = np.zeros(n_v)
        cbar_p[net.park_idx] = pp
        self._set("cbar_c", cbar_c)
        self._set("cbar_p", cbar_p)

    def _set(self, name, arr):
        arr.setflags(write=False)
        object.__setattr__(self, name, arr)

    @property
    def N(self) -> int:
        return len(self.agents)

    @property
    def n_i(self) -> int:
        return self.network.n_e + 2 * self.network.n_v

    @property
    def n_disc(self) -> int:
        """Discounts per agent."""
        return self.network.n_c + self.network.n_p

    @property
    def m(self) -> int:
        return self.N * self.n_disc

    @property
    def phi(self) -> slice:
        return slice(0, self.network.n_e)

    @property
    def gc(self) -> slice:
        n_e, n_v = self.network.n_e, self.network.n_v
        return slice(n_e, n_e + n_v)

    @property
    def gp(self) -> slice:
        n_e, n_v = self.network.n_e, self.network.n_v
        return slice(n_e + n_v, n_e + 2 * n_v)

    def base_prices(self) -> np.ndarray:
        """Base price of every discount coordinate (length ``m``)."""
        return np.tile(np.concatenate([self.charge_price, self.park_price]), self.N)

    def discount_index(self, agent: int, kind: str, node: int) -> int:
        """Position in ``c`` of agent ``agent``'s charging/parking discount at ``node`` (label)."""
        net = self.network
        j = net.index(node)
        if kind == "charge":
            k = int(np.flatnonzero(net.charge_idx == j)[0]) if j in net.charge_idx else None
        elif kind == "park":
            k = net.n_c + int(np.flatnonzero(net.park_idx == j)[0]) if j in net.park_idx else None
        else:
            raise ValueError(f"unknown discount kind {kind!r}")
        if k is None:
            raise KeyError(f"node {node} has no {kind} facility")
        return agent * self.n_disc + k

    def node_discounts(self, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Discounts spread over nodes: arrays of shape ``(N, n_v)`` (zero off facilities)."""
        net = self.network
        c = np.asarray(c, dtype=float).reshape(self.N, self.n_disc)
        dc = np.zeros((self.N, net.n_v))
        dp = np.zeros((self.N, net.n_v))
        dc[:, net.charge_idx] = c[:, :net.n_c]
        dp[:, net.park_idx] = c[:, net.n_c:]
        return dc, dp

    def uniform_profile(self) -> np.ndarray:
        """Projection of the point with every coordinate 1/2 onto each agent's set (no solver state kept)."""
        from .projection import project
        return np.array([project(p, np.full(self.n_i, 0.5)).point for p in self.polyhedra]).reshape(self.N, self.n_i)

    def check_profile(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        if Y.shape != (self.N, self.n_i):
            raise ValueError(f"profile must have shape {(self.N, self.n_i)}, got {Y.shape}")
        return Y


# ---------------------------------------------------------------------------
# Aggregates, cost and pseudo-gradient
# ---------------------------------------------------------------------------

def aggregate_flow(game: Game, Y: np.ndarray) -> np.ndarray:
    """sigma = sum_i P_i phi_i, accumulated in agent order."""
    Y = np.asarray(Y, dtype=float)
    sigma = np.zeros(game.network.n_e)
    for i in range(game.N):
        sigma += game.P[i] * Y[i, game.phi]
    return sigma


def aggregate_sensitivity(game: Game, S: np.ndarray) -> np.ndarray:
    """sum_i P_i (phi rows of s_i), shape ``(n_e, m)``."""
    S = np.asarray(S, dtype=float)
    out = np.zeros((game.network.n_e, S.shape[-1]))
    for i in range(game.N):
        out += game.P[i] * S[i, game.phi]
    return out


def cost_terms(game: Game, i: int, c: np.ndarray, y: np.ndarray, sigma: np.ndarray) -> dict:
    """The four cost components of agent ``i`` (travel, charging, parking, last mile)."""
    net = game.network
    dc, dp = game.node_discounts(c)
    phi, gc, gp = y[game.phi], y[game.gc], y[game.gp]
    eta, P = game.eta[i], game.P[i]
    travel = eta * P * np.dot(phi, net.a + net.b * (net.h + sigma))
    charge = game.q[i] * np.dot(gc, game.cbar_c - dc[i])
    park = np.dot(gp, game.cbar_p - dp[i])
    dev = gc + gp - game.ghat[i]
    lastmile = eta * np.dot(game.W[i] * dev, dev)
    return {"travel": float(travel), "charge": float(charge), "park": float(park), "lastmile": float(lastmile)}


def agent_cost(game: Game, i: int, c: np.ndarray, y: np.ndarray, sigma: np.ndarray) -> float:
    """Total cost (dollars) of agent ``i`` playing ``y`` against aggregate flow ``sigma``."""
    return sum(cost_terms(game, i, c, np.asarray(y, dtype=float), np.asarray(sigma, dtype=float)).values())


def pseudo_gradient(game: Game, c: np.ndarray, Y: np.ndarray, sigma: np.ndarray | None = None) -> np.ndarray:
    """Stacked gradients of each agent's cost in its own strategy, shape ``(N, n_i)``."""
    Y = game.check_profile(Y)
    net = game.network
    if sigma is None:
        sigma = aggregate_flow(game, Y)
    dc, dp = game.node_discounts(c)
    eP = (game.eta * game.P)[:, None]
    F = np.empty_like(Y)
    F[:, game.phi] = eP * (net.a + net.b * (net.h + sigma) + net.b * game.P[:, None] * Y[:, game.phi])
    lm = 2 * game.eta[:, None] * game.W * (Y[:, game.gc] + Y[:, game.gp] - game.ghat)
    F[:, game.gc] = game.q[:, None] * (game.cbar_c - dc) + lm
    F[:, game.gp] = (game.cbar_p - dp) + lm
    return F


def agent_gradient(game: Game, i: int, c: np.ndarray, y: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Row ``i`` of :func:`pseudo_gradient` given the aggregate flow (which includes ``y``)."""
    net = game.network
    dc, dp = game.node_discounts(c)
    eta, P = game.eta[i], game.P[i]
    F = np.empty(game.n_i)
    F[game.phi] = eta * P * (net.a + net.b * (net.h + sigma) + net.b * P * y[game.phi])
    lm = 2 * eta * game.W[i] * (y[game.gc] + y[game.gp] - game.ghat[i])
    F[game.gc] = game.q[i] * (game.cbar_c - dc[i]) + lm
    F[game.gp] = (game.cbar_p - dp[i]) + lm
    return F


# ---------------------------------------------------------------------------
# Constant partial Jacobians of F_i
# ---------------------------------------------------------------------------

def own_jacobian(game: Game, i: int) -> np.ndarray:
    """dF_i/dy_i with the aggregate flow held fixed."""
    n_e, n_v = game.network.n_e, game.network.n_v
    J = np.zeros((game.n_i, game.n_i))
    J[:n_e, :n_e] = np.diag(game.eta[i] * game.P[i] ** 2 * game.network.b)
    w = np.diag(2 * game.eta[i] * game.W[i])
    J[n_e:n_e + n_v, n_e:n_e + n_v] = w
    J[n_e:n_e + n_v, n_e + n_v:] = w
    J[n_e + n_v:, n_e:n_e + n_v] = w
    J[n_e + n_v:, n_e + n_v:] = w
    return J


def sigma_jacobian(game: Game, i: int) -> np.ndarray:
    """dF_i/dsigma, shape ``(n_i, n_e)``."""
    n_e = game.network.n_e
    J = np.zeros((game.n_i, n_e))
    J[:n_e] = np.diag(game.eta[i] * game.P[i] * game.network.b)
    return J


def discount_jacobian(game: Game, i: int) -> np.ndarray:
    """dF_i/dc, shape ``(n_i, m)``; only agent ``i``'s own discounts enter."""
    net = game.network
    J = np.zeros((game.n_i, game.m))
    base = i * game.n_disc
    J[net.n_e + net.charge_idx, base + np.arange(net.n_c)] = -game.q[i]
    J[net.n_e + net.n_v + net.park_idx, base + net.n_c + np.arange(net.n_p)] = -1.0
    return J


def full_jacobian(game: Game) -> np.ndarray:
    """Dense Jacobian of the stacked pseudo-gradient in the stacked profile."""
    n_i, N = game.n_i, game.N
    n_e = game.network.n_e
    J = np.zeros((N * n_i, N * n_i))
    for i in range(N):
        J[i * n_i:(i + 1) * n_i, i * n_i:(i + 1) * n_i] = own_jacobian(game, i)
        for j in range(N):
            J[i * n_i:i * n_i + n_e, j * n_i:j * n_i + n_e] += np.diag(
                game.eta[i] * game.P[i] * game.P[j] * game.network.b)
    return J


def free_mask(game: Game) -> np.ndarray:
    """Coordinates not pinned by the box, shape ``(N, n_i)``."""
    return np.array([p.upper > p.lower for p in game.polyhedra]).reshape(game.N, game.n_i)


# ---------------------------------------------------------------------------
# Monotonicity certificate and step size
# ---------------------------------------------------------------------------

@dataclass
class MonotonicityReport:
    """Constants of the (affine) pseudo-gradient on the non-pinned coordinates.

    ``min_eig`` is the strong-monotonicity modulus, ``phi_min``/``g_min`` its
    value on the route and facility blocks, ``lipschitz`` the spectral norm.
    """

    min_eig: float
    phi_min: float
    g_min: float
    lipschitz: float
    phi_blocks: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]
    g_blocks: list = field(repr=False, default_factory=list)

    @property
    def strongly_monotone(self) -> bool:
        return self.min_eig > 0

    def contraction_factor(self, gamma: float) -> float:
        """Upper bound on the Lipschitz constant of one projected-gradient step."""
        return _step_norm(self, gamma)


def _phi_blocks(game: Game) -> np.ndarray:
    """Per-edge ``N x N`` Jacobian blocks of the route coordinates."""
    etaP = game.eta * game.P
    K0 = np.outer(etaP, game.P) + np.diag(etaP * game.P)
    return game.network.b[:, None, None] * K0[None]


def _g_blocks(game: Game) -> list:
    """Per (agent, node) Jacobian blocks over the free facility coordinates."""
    mask = free_mask(game)
    blocks = []
    n_v = game.network.n_v
    for i in range(game.N):
        fc = mask[i, game.gc]
        fp = mask[i, game.gp]
        for j in range(n_v):
            k = int(fc[j]) + int(fp[j])
            if k:
                blocks.append(np.full((k, k), 2 * game.eta[i] * game.W[i, j]))
    return blocks


def monotonicity_certificate(game: Game) -> tuple[float, MonotonicityReport]:
    """Minimum eigenvalue of the symmetrized pseudo-gradient Jacobian.

    After permuting coordinates the Jacobian is block diagonal: one ``N x N``
    block per edge (route coordinates of all agents) and one small block per
    agent and facility node. Pinned coordinates never move, so they are
    dropped; a node offering both charging and parking to one agent has a
    singular block (only the sum of the two fractions is priced by the last
    mile), which makes the certificate zero.
    """
    phi = _phi_blocks(game)
    if phi.size:
        sym = 0.5 * (phi + np.transpose(phi, (0, 2, 1)))
        phi_min = float(np.linalg.eigvalsh(sym)[:, 0].min())
        phi_norm = float(np.linalg.svd(phi, compute_uv=False)[:, 0].max())
    else:
        phi_min, phi_norm = np.inf, 0.0
    gb = _g_blocks(game)
    if gb:
        g_min = min(float(np.linalg.eigvalsh(b)[0]) for b in gb)
        g_norm = max(float(np.linalg.eigvalsh(b)[-1]) for b in gb)
    else:
        g_min, g_norm = np.inf, 0.0
    mu = min(phi_min, g_min)
    if not np.isfinite(mu):
        mu = 0.0
    report = MonotonicityReport(mu, phi_min if np.isfinite(phi_min) else 0.0,
                                g_min if np.isfinite(g_min) else 0.0, max(phi_norm, g_norm), phi, gb)
    return mu, report


def _step_norm(report: MonotonicityReport, gamma: float) -> float:
    worst = 0.0
    if report.phi_blocks is not None and report.phi_blocks.size:
        N = report.phi_blocks.shape[1]
        T = np.eye(N)[None] - gamma * report.phi_blocks
        worst = float(np.linalg.svd(T, compute_uv=False)[:, 0].max())
    for b in report.g_blocks:
        lam = np.linalg.eigvalsh(b)
        worst = max(worst, float(np.abs(1 - gamma * lam).max()))
    return worst


def step_size(report: MonotonicityReport, rule: str = "optimal") -> float:
    """Step size for the projected pseudo-gradient iteration.

    ``"classical"`` returns mu/L^2. ``"optimal"`` minimizes the contraction
    bound ``max_b ||I - gamma M_b||_2`` over the Jacobian blocks; this is
    never worse than the classical choice.
    """
    mu, L = report.min_eig, report.lipschitz
    if L <= 0:
        return 1.0
    classical = mu / L ** 2 if mu > 0 else 1.0 / L
    if rule == "classical":
        return classical
    if rule != "optimal":
        raise ValueError(f"unknown step rule {rule!r}")
    res = sopt.minimize_scalar(lambda g: _step_norm(report, g), bounds=(0.0, 2.0 / L), method="bounded",
                               options={"xatol": 1e-6 / L})
    best = float(res.x)
    return best if _step_norm(report, best) <= _step_norm(report, classical) else classical
