"""Scenario configuration, seeded generation and serialization.

A scenario file is JSON with the sections below (all optional unless noted)::

    {
      "name": "demo",
      "seed": 0,
      "network": {                      # required, one of:
        "inline": {...RoadNetwork JSON...}
        | "tntp": "net.tntp", "flow": "flow.tntp", "node_subset": [...],
          "reference_flow_policy": "capacity", "augment": true,
          "background_flow_fraction": 0.8, "time_scale": 1.0
        | "synthetic": {"n_v": 25, "seed": 1},
        "charge_nodes": [...], "park_nodes": [...]   # for tntp/synthetic
      },
      "prices": {"charge": [...], "park": [...]},   # per facility, index order
      "agents": [ {...agent fields...} ]            # explicit classes, or
      "generate": {"n_pev": 20, "n_fv": 20, "n_veh": 242584, "rho_pev": 0.05,
                   "rho_fv": 0.2, "penetration": 0.2, "eta": [30, 30],
                   "q": [20, 60], "min_charge": [0, 0.5], "slot_fraction": 0.75,
                   "eps_w": 0.001, "destinations_outside_facilities": true},
      "ta": {"edges": "all" | [edge indices] | {"into_nodes": [...]},
             "budget": 5000, "mu": 1000, "max_discount": {"charge": 0.2, "park": 5},
             "uniform": false, "objective": "ttt"},
      "schedules": {"alpha0": null, "p": 0.75, "sigma0": 1e-5, "q": 0.5},
      "solver": {"gamma": null, "max_outer": 500, "inner_max_iters": 20000}
    }

``time_scale`` multiplies the linearized latency coefficients, for example
1/60 for files that list free-flow times in minutes. Without an explicit
``background_flow_fraction`` it defaults to one minus the generator's
penetration rate.

``max_discount`` gives absolute caps ($/kWh for charging, $ for parking)
that are turned into fractions of each facility's base price; ``caps``
(fractions, one per facility or per discount coordinate) may be given instead.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..agents import AgentClass, Game, VehicleKind, lastmile_weights
from ..incentives import Schedules, TAProblem, validate_schedules
from ..network import RoadNetwork, build_network, free_flow_distances, load_tntp, make_network


class ScenarioError(ValueError):
    """Inconsistent or incomplete scenario description."""


@dataclass
class SolverSettings:
    gamma: float | None = None
    step_rule: str = "optimal"
    max_outer: int = 500
    inner_max_iters: int = 20000


@dataclass
class Scenario:
    name: str
    game: Game
    problem: TAProblem
    schedules: Schedules
    solver: SolverSettings = field(default_factory=SolverSettings)
    seed: int = 0

    def to_dict(self) -> dict:
        """Fully materialized document (inline network, explicit agents)."""
        g = self.game
        return {
            "name": self.name,
            "seed": self.seed,
            "network": {"inline": g.network.to_dict()},
            "prices": {"charge": g.charge_price.tolist(), "park": g.park_price.tolist()},
            "agents": [agent_to_dict(a) for a in g.agents],
            "ta": {
                "edges": self.problem.edges.tolist(),
                "budget": self.problem.budget,
                "mu": self.problem.mu,
                "caps": None if self.problem.caps is None else self.problem.caps.tolist(),
                "uniform": self.problem.uniform,
                "objective": self.problem.objective,
            },
            "schedules": {"alpha0": self.schedules.alpha0, "p": self.schedules.p,
                          "sigma0": self.schedules.sigma0, "q": self.schedules.q},
            "solver": {"gamma": self.solver.gamma, "step_rule": self.solver.step_rule,
                       "max_outer": self.solver.max_outer, "inner_max_iters": self.solver.inner_max_iters},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def with_problem(self, **kw) -> "Scenario":
        return Scenario(self.name, self.game, self.problem.with_(**kw), self.schedules, self.solver, self.seed)


def agent_to_dict(a: AgentClass) -> dict:
    return {
        "id": a.id, "kind": a.kind.value, "population": a.population, "origin": a.origin,
        "destination": a.destination, "value_of_time": a.value_of_time, "energy_demand": a.energy_demand,
        "min_charge": a.min_charge, "charge_slots": a.charge_slots.tolist(), "park_slots": a.park_slots.tolist(),
        "weights": a.weights.tolist(), "eps_w": a.eps_w,
    }


def agent_from_dict(doc: dict, network: RoadNetwork, distances: dict | None = None) -> AgentClass:
    P = float(doc["population"])
    eps_w = float(doc.get("eps_w", 1e-3))
    charge_slots = doc.get("charge_slots")
    park_slots = doc.get("park_slots")
    if charge_slots is None:
        charge_slots = np.full(network.n_c, P)
    if park_slots is None:
        park_slots = np.full(network.n_p, P)
    weights = doc.get("weights")
    if weights is None:
        d = doc["destination"]
        dist = None if distances is None else distances.get(d)
        weights = lastmile_weights(network, d, eps_w, dist)
    kind = VehicleKind(doc.get("kind", "fv"))
    return AgentClass(
        id=int(doc.get("id", 0)), kind=kind, population=P, origin=int(doc["origin"]),
        destination=int(doc["destination"]), value_of_time=float(doc["value_of_time"]),
        energy_demand=float(doc.get("energy_demand", 0.0)), min_charge=float(doc.get("min_charge", 0.0)),
        charge_slots=np.broadcast_to(np.asarray(charge_slots, dtype=float), (network.n_c,)),
        park_slots=np.broadcast_to(np.asarray(park_slots, dtype=float), (network.n_p,)),
        weights=np.asarray(weights, dtype=float), eps_w=eps_w,
    )


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def synthetic_network(n_v: int, seed: int = 0, n_charge: int = 2, n_park: int = 2,
                      background: tuple[float, float] = (5.0, 20.0)) -> RoadNetwork:
    """Grid-like, strongly connected road network with ``n_v`` nodes.

    Nodes are laid out row by row on a near-square lattice; neighbours are
    joined by edges in both directions. Free-flow times are uniform in
    [0.05, 0.2] h and slopes in [0.002, 0.01] h/vehicle.
    """
    if n_v < 2:
        raise ScenarioError("a network needs at least two nodes")
    rng = np.random.default_rng(seed)
    cols = int(np.ceil(np.sqrt(n_v)))
    pairs = []
    for v in range(n_v):
        r, col = divmod(v, cols)
        if col + 1 < cols and v + 1 < n_v:
            pairs.append((v, v + 1))
        if v + cols < n_v:
            pairs.append((v, v + cols))
    edges = []
    for u, v in pairs:
        for t, hd in ((u, v), (v, u)):
            edges.append((t + 1, hd + 1, rng.uniform(0.05, 0.2), rng.uniform(0.002, 0.01), rng.uniform(*background)))
    fac = rng.choice(np.arange(1, n_v + 1), size=min(n_charge + n_park, n_v), replace=False)
    return make_network(edges, charge_nodes=fac[:n_charge].tolist(), park_nodes=fac[n_charge:].tolist(),
                        nodes=list(range(1, n_v + 1)))


def _read_text(path: str | Path, base: Path | None) -> str:
    p = Path(path)
    if not p.is_absolute() and base is not None and (base / p).exists():
        p = base / p
    if not p.exists():
        data = resources.files("traffic_incentives") / "data" / str(path)
        if data.is_file():
            return data.read_text()
        raise ScenarioError(f"file not found: {path}")
    return p.read_text()


def network_from_spec(doc: dict, base: Path | None = None, penetration: float | None = None) -> RoadNetwork:
    if "inline" in doc:
        return RoadNetwork.from_dict(doc["inline"])
    if "synthetic" in doc:
        syn = doc["synthetic"]
        return synthetic_network(int(syn["n_v"]), int(syn.get("seed", 0)), int(syn.get("n_charge", 2)),
                                 int(syn.get("n_park", 2)))
    if "tntp" in doc:
        net_text = _read_text(doc["tntp"], base)
        flow_text = _read_text(doc["flow"], base) if doc.get("flow") else None
        raw, n_nodes = load_tntp(net_text, flow_text)
        frac = doc.get("background_flow_fraction")
        if frac is None:
            frac = 1.0 - penetration if penetration is not None else 0.8
        net = build_network(raw, n_nodes, doc.get("charge_nodes", []), doc.get("park_nodes", []),
                            doc.get("reference_flow_policy", "capacity"), frac, doc.get("node_subset"),
                            doc.get("augment", True))
        ts = float(doc.get("time_scale", 1.0))
        return net if ts == 1.0 else dataclasses.replace(net, a=net.a * ts, b=net.b * ts)
    raise ScenarioError("network section needs one of 'inline', 'synthetic' or 'tntp'")


# ---------------------------------------------------------------------------
# Agent generation
# ---------------------------------------------------------------------------

GENERATE_DEFAULTS = {
    "n_pev": 20, "n_fv": 20, "n_veh": 242584, "rho_pev": 0.05, "rho_fv": 0.20, "penetration": 0.2,
    "eta": [30.0, 30.0], "q": [20.0, 60.0], "min_charge": [0.0, 0.5], "slot_fraction": 0.75, "eps_w": 1e-3,
    "destinations_outside_facilities": True,
}


def class_sizes(gen: dict) -> tuple[float, float]:
    """Vehicles per PEV class and per FV class."""
    n_pev, n_fv = int(gen["n_pev"]), int(gen["n_fv"])
    P_pev = gen["rho_pev"] * gen["n_veh"] / n_pev if n_pev else 0.0
    P_fv = gen["rho_fv"] * gen["n_veh"] / n_fv if n_fv else 0.0
    return P_pev, P_fv


def _slots(P: float, n_fac: int, frac: float) -> np.ndarray:
    return np.full(n_fac, frac * P / n_fac) if n_fac else np.zeros(0)


def generate_agents(network: RoadNetwork, gen: dict, rng: np.random.Generator) -> list[AgentClass]:
    """Random vehicle classes; the slot rule of the generator is documented in the README."""
    gen = {**GENERATE_DEFAULTS, **gen}
    pen = gen["penetration"]
    if not 0 < pen <= 1:
        raise ScenarioError("penetration must lie in (0, 1]")
    n_pev, n_fv = int(gen["n_pev"]), int(gen["n_fv"])
    if n_pev < 0 or n_fv < 0:
        raise ScenarioError("class counts must be non-negative")
    if n_pev and network.n_c == 0:
        raise ScenarioError("electric vehicles need at least one charging node")
    if n_fv and network.n_p == 0:
        raise ScenarioError("fuel vehicles need at least one parking node")
    P_pev, P_fv = class_sizes(gen)
    labels = np.array(network.nodes)
    fac = set(network.charge_nodes) | set(network.park_nodes)
    dest_pool = np.array([v for v in labels if v not in fac]) if gen["destinations_outside_facilities"] else labels
    if len(dest_pool) == 0:
        dest_pool = labels
    frac = gen["slot_fraction"]
    dist_cache: dict = {}
    agents = []
    for k in range(n_pev + n_fv):
        pev = k < n_pev
        P = P_pev if pev else P_fv
        d = int(rng.choice(dest_pool))
        o = int(rng.choice(labels[labels != d]))
        eta = float(rng.uniform(*gen["eta"]))
        q = float(rng.uniform(*gen["q"])) if pev else 0.0
        gbar = float(rng.uniform(*gen["min_charge"])) if pev else 0.0
        c_slots = _slots(P, network.n_c, frac)
        p_slots = _slots(P, network.n_p, frac)
        usable = (np.minimum(c_slots, P).sum() if pev else 0.0) + np.minimum(p_slots, P).sum()
        if usable < P:
            # the per-facility share leaves no room for the whole class; cap each facility at frac * P
            c_slots = np.full(network.n_c, frac * P)
            p_slots = np.full(network.n_p, frac * P)
            usable = (np.minimum(c_slots, P).sum() if pev else 0.0) + np.minimum(p_slots, P).sum()
            if usable < P:
                raise ScenarioError(f"class {k}: facility slots cannot host all {P:.6g} vehicles")
        if pev and gbar * P > c_slots.sum():
            raise ScenarioError(f"class {k}: minimum charge exceeds charging capacity")
        if d not in dist_cache:
            dist_cache[d] = free_flow_distances(network, [d])[:, 0]
        agents.append(AgentClass(
            id=k, kind=VehicleKind.PEV if pev else VehicleKind.FV, population=P, origin=o, destination=d,
            value_of_time=eta, energy_demand=q, min_charge=gbar, charge_slots=c_slots, park_slots=p_slots,
            weights=lastmile_weights(network, d, gen["eps_w"], dist_cache[d]), eps_w=gen["eps_w"]))
    return agents


# ---------------------------------------------------------------------------
# TA problem
# ---------------------------------------------------------------------------

def _edges_from_spec(spec, network: RoadNetwork) -> np.ndarray:
    if spec is None or spec == "all":
        return np.arange(network.n_e)
    if isinstance(spec, dict) and "into_nodes" in spec:
        idx = [network.index(v) for v in spec["into_nodes"]]
        return np.flatnonzero(np.isin(network.heads, idx))
    return np.asarray(spec, dtype=np.int64)


def _caps_from_spec(ta: dict, charge_price: np.ndarray, park_price: np.ndarray) -> np.ndarray:
    if ta.get("caps") is not None:
        return np.asarray(ta["caps"], dtype=float)
    md = ta.get("max_discount", {"charge": 0.2, "park": 5.0})
    caps = np.concatenate([np.asarray(md["charge"], dtype=float) / charge_price if charge_price.size else np.zeros(0),
                           np.asarray(md["park"], dtype=float) / park_price if park_price.size else np.zeros(0)])
    caps = np.broadcast_to(caps, (charge_price.size + park_price.size,)).copy()
    if np.any(caps >= 1) or np.any(caps <= 0):
        raise ScenarioError("maximum discounts must be positive and below the base prices")
    return caps


def scenario_from_dict(doc: dict, seed: int | None = None, base: Path | None = None) -> Scenario:
    """Materialize a scenario; ``seed`` overrides the document's seed."""
    doc = copy.deepcopy(doc)
    seed = int(doc.get("seed", 0) if seed is None else seed)
    gen = doc.get("generate")
    if "network" not in doc:
        raise ScenarioError("scenario needs a network section")
    network = network_from_spec(doc["network"], base, None if gen is None else gen.get("penetration", 0.2))
    prices = doc.get("prices", {})
    charge_price = np.asarray(prices.get("charge", [0.35] * network.n_c), dtype=float)
    park_price = np.asarray(prices.get("park", [17.0] * network.n_p), dtype=float)
    if charge_price.shape != (network.n_c,) or park_price.shape != (network.n_p,):
        raise ScenarioError("one base price per facility node is required")
    rng = np.random.default_rng(seed)
    if "agents" in doc:
        dist: dict = {}
        agents = []
        for k, a in enumerate(doc["agents"]):
            a.setdefault("id", k)
            if a.get("weights") is None and a["destination"] not in dist:
                dist[a["destination"]] = free_flow_distances(network, [a["destination"]])[:, 0]
            agents.append(agent_from_dict(a, network, dist))
    elif gen is not None:
        agents = generate_agents(network, gen, rng)
    else:
        agents = []
    game = Game(network, agents, charge_price, park_price)
    ta = doc.get("ta", {})
    problem = TAProblem(
        edges=_edges_from_spec(ta.get("edges"), network),
        budget=float(ta.get("budget", 5000.0)),
        mu=float(ta.get("mu", 1e3)),
        caps=_caps_from_spec(ta, charge_price, park_price),
        uniform=bool(ta.get("uniform", False)),
        objective=ta.get("objective", "ttt"),
    )
    problem.check(game)
    sch = doc.get("schedules", {})
    schedules = Schedules(sch.get("alpha0"), float(sch.get("p", 0.75)), float(sch.get("sigma0", 1e-5)),
                          float(sch.get("q", 0.5)))
    bad = validate_schedules(schedules)
    if bad:
        raise ScenarioError("invalid schedules: " + "; ".join(bad))
    sol = doc.get("solver", {})
    solver = SolverSettings(sol.get("gamma"), sol.get("step_rule", "optimal"), int(sol.get("max_outer", 500)),
                            int(sol.get("inner_max_iters", 20000)))
    return Scenario(doc.get("name", "scenario"), game, problem, schedules, solver, seed)


def generate_scenario(spec: dict, seed: int) -> Scenario:
    return scenario_from_dict(spec, seed)


def load_scenario(path: str | Path, seed: int | None = None) -> Scenario:
    """Read a scenario file; bare names resolve to the bundled demos."""
    p = Path(path)
    if p.exists():
        return scenario_from_dict(json.loads(p.read_text()), seed, p.parent)
    name = str(path) if str(path).endswith(".json") else f"{path}.json"
    data = resources.files("traffic_incentives") / "data" / name
    if not data.is_file():
        raise ScenarioError(f"scenario not found: {path}")
    return scenario_from_dict(json.loads(data.read_text()), seed)


def bundled_scenario(name: str, seed: int | None = None) -> Scenario:
    return load_scenario(name, seed)


def small_scenario(seed: int, n_agents: int = 3, n_pev: int | None = None, eps_w: float = 0.05,
                   budget: float = 5.0) -> Scenario:
    """Random four-node instance small enough for the brute-force oracles.

    Node 2 offers charging, nodes 3 and 4 parking; roads join 1-2, 1-3, 2-4,
    3-4 and 2-3 in both directions. With three agents the stacked profile has
    54 coordinates.
    """
    rng = np.random.default_rng(seed)
    pairs = [(1, 2), (1, 3), (2, 4), (3, 4), (2, 3)]
    edges = []
    for u, v in pairs:
        for t, hd in ((u, v), (v, u)):
            edges.append((t, hd, rng.uniform(0.1, 0.3), rng.uniform(0.02, 0.05), rng.uniform(0.0, 5.0)))
    network = make_network(edges, charge_nodes=[2], park_nodes=[3, 4], nodes=[1, 2, 3, 4])
    n_pev = n_agents // 2 if n_pev is None else n_pev
    agents = []
    for k in range(n_agents):
        pev = k < n_pev
        d = int(rng.integers(1, 5))
        o = int(rng.choice([v for v in (1, 2, 3, 4) if v != d]))
        P = float(rng.uniform(1.0, 3.0))
        agents.append(AgentClass(
            id=k, kind=VehicleKind.PEV if pev else VehicleKind.FV, population=P, origin=o, destination=d,
            value_of_time=float(rng.uniform(5.0, 15.0)), energy_demand=float(rng.uniform(5.0, 15.0)) if pev else 0.0,
            min_charge=float(rng.uniform(0.0, 0.5)) if pev else 0.0,
            charge_slots=np.array([0.8 * P]), park_slots=np.array([0.8 * P, 0.8 * P]),
            weights=lastmile_weights(network, d, eps_w), eps_w=eps_w))
    game = Game(network, agents, [0.35], [2.0, 3.0])
    caps = np.array([0.2 / 0.35, 0.5, 0.5])
    problem = TAProblem(edges=np.flatnonzero(np.isin(network.heads, [network.index(2)])), budget=budget, caps=caps)
    return Scenario(f"small-{seed}", game, problem, Schedules(), SolverSettings(), seed)
