"""Road network representation, TNTP ingestion and latency linearization.

Edge latencies are kept in the affine form ``t(x) = a + b * (h + x)`` where ``h``
is the exogenous (non-reactive) background flow and ``x`` the aggregate flow of
the reactive vehicle classes.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

SCHEMA_VERSION = 1

_REQUIRED_TAGS = ("NUMBER OF NODES", "NUMBER OF LINKS", "FIRST THRU NODE", "END OF METADATA")
_A_FLOOR = 1e-6


class TntpParseError(ValueError):
    """Raised when a TNTP file does not follow the expected layout."""


class NetworkValidationError(ValueError):
    """Raised when network data violates a structural invariant."""


class ConnectivityError(NetworkValidationError):
    """Raised when a network is not strongly connected."""

    def __init__(self, message: str, unreachable: list[tuple[int, int]]):
        super().__init__(message)
        self.unreachable = unreachable


class UnsupportedExponentError(ValueError):
    """Raised when a BPR power below one is linearized."""


@dataclass(frozen=True)
class RawTntpEdge:
    tail: int
    head: int
    capacity: float
    length: float
    free_flow_time: float
    bpr_coefficient: float
    bpr_power: float
    recorded_flow: float | None = None

    def bpr_time(self, flow: float) -> float:
        return self.free_flow_time * (1.0 + self.bpr_coefficient * (flow / self.capacity) ** self.bpr_power)


# ---------------------------------------------------------------------------
# TNTP parsing
# ---------------------------------------------------------------------------

def _parse_metadata(lines: list[str]) -> tuple[dict[str, str], int]:
    meta: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        match = re.match(r"<([^>]+)>\s*(.*)", line)
        if match is None:
            break
        tag, value = match.group(1).strip().upper(), match.group(2).strip()
        meta[tag] = value
        if tag == "END OF METADATA":
            return meta, lineno
    missing = [t for t in _REQUIRED_TAGS if t not in meta]
    raise TntpParseError(f"TNTP header is missing <{missing[0]}>")


def _header_int(meta: dict[str, str], tag: str) -> int:
    if tag not in meta:
        raise TntpParseError(f"TNTP header is missing <{tag}>")
    try:
        return int(meta[tag])
    except ValueError as exc:
        raise TntpParseError(f"header tag <{tag}> is not an integer: {meta[tag]!r}") from exc


def _parse_flow_file(flow_text: str) -> dict[tuple[int, int], float]:
    flows: dict[tuple[int, int], float] = {}
    for lineno, raw in enumerate(flow_text.splitlines(), start=1):
        line = raw.strip().rstrip(";").strip()
        if not line or line.startswith("~") or line.startswith("<"):
            continue
        parts = line.split()
        if len(parts) < 3:
            continue
        try:
            tail, head, volume = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            # column titles such as "From To Volume Cost"
            if lineno <= 2:
                continue
            raise TntpParseError(f"flow file line {lineno}: non-numeric field in {raw!r}")
        flows[(tail, head)] = volume
    return flows


def load_tntp(net_text: str, flow_text: str | None = None) -> tuple[list[RawTntpEdge], int]:
    """Parse TNTP network text (and optionally a flow file).

    Returns the link rows in file order and the declared node count. Node ids
    keep their 1-based TNTP labels.
    """
    lines = net_text.splitlines()
    meta, end = _parse_metadata(lines)
    for tag in _REQUIRED_TAGS:
        if tag not in meta:
            raise TntpParseError(f"TNTP header is missing <{tag}>")
    n_nodes = _header_int(meta, "NUMBER OF NODES")
    n_links = _header_int(meta, "NUMBER OF LINKS")
    flows = _parse_flow_file(flow_text) if flow_text is not None else {}

    edges: list[RawTntpEdge] = []
    for lineno in range(end + 1, len(lines) + 1):
        line = lines[lineno - 1].strip()
        if not line or line.startswith("~"):
            continue
        line = line.rstrip(";").strip()
        fields = line.split()
        if len(fields) < 7:
            raise TntpParseError(f"line {lineno}: expected at least 7 columns, got {len(fields)}")
        try:
            tail, head = int(fields[0]), int(fields[1])
            capacity, length, fft, coef, power = (float(v) for v in fields[2:7])
        except ValueError as exc:
            raise TntpParseError(f"line {lineno}: non-numeric field in {lines[lineno - 1]!r}") from exc
        for node in (tail, head):
            if not 1 <= node <= n_nodes:
                raise NetworkValidationError(f"line {lineno}: node {node} outside declared range 1..{n_nodes}")
        if capacity <= 0:
            raise NetworkValidationError(f"line {lineno}: capacity must be positive, got {capacity}")
        if fft <= 0:
            raise NetworkValidationError(f"line {lineno}: free_flow_time must be positive, got {fft}")
        if power < 1:
            raise NetworkValidationError(f"line {lineno}: BPR power must be >= 1, got {power}")
        edges.append(RawTntpEdge(tail, head, capacity, length, fft, coef, power, flows.get((tail, head))))
    if len(edges) != n_links:
        raise NetworkValidationError(f"header declares {n_links} links but {len(edges)} rows were read")
    return edges, n_nodes


def write_tntp(edges: Sequence[RawTntpEdge], n_nodes: int) -> str:
    """Render edges back into TNTP network text."""
    first_thru = 1
    out = [
        f"<NUMBER OF ZONES> {n_nodes}",
        f"<NUMBER OF NODES> {n_nodes}",
        f"<FIRST THRU NODE> {first_thru}",
        f"<NUMBER OF LINKS> {len(edges)}",
        "<END OF METADATA>",
        "",
        "~\tinit_node\tterm_node\tcapacity\tlength\tfree_flow_time\tb\tpower\tspeed\ttoll\tlink_type\t;",
    ]
    for e in edges:
        out.append(
            f"\t{e.tail}\t{e.head}\t{e.capacity!r}\t{e.length!r}\t{e.free_flow_time!r}"
            f"\t{e.bpr_coefficient!r}\t{e.bpr_power!r}\t0\t0\t1\t;"
        )
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------

def linearize_latency(edge: RawTntpEdge, reference_flow: float) -> tuple[float, float]:
    """Tangent of the BPR curve at ``reference_flow``, written as ``a + b * x``.

    ``a`` is floored at ``1e-6 * free_flow_time`` so free-flow times stay
    positive; ``b`` is floored at zero.
    """
    if edge.bpr_power < 1:
        raise UnsupportedExponentError(f"BPR power {edge.bpr_power} < 1 cannot be linearized")
    if reference_flow < 0:
        raise ValueError("reference_flow must be non-negative")
    fft, k, p, cap = edge.free_flow_time, edge.bpr_coefficient, edge.bpr_power, edge.capacity
    if p == 1:
        return fft, fft * k / cap
    slope = fft * k * p * reference_flow ** (p - 1) / cap**p
    intercept = edge.bpr_time(reference_flow) - slope * reference_flow
    return max(intercept, _A_FLOOR * fft), max(slope, 0.0)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RoadNetwork:
    """Directed road graph with affine latencies and facility locations.

    ``tails``/``heads`` hold node *indices* into ``nodes``; facility sets are
    given as node labels. Arrays are made read-only on construction.
    """

    nodes: tuple[int, ...]
    tails: np.ndarray
    heads: np.ndarray
    a: np.ndarray
    b: np.ndarray
    h: np.ndarray
    charge_nodes: tuple[int, ...]
    park_nodes: tuple[int, ...]
    virtual: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        n_e = len(self.tails)
        virtual = np.zeros(n_e, dtype=bool) if self.virtual is None else np.asarray(self.virtual, dtype=bool)
        for name, value in (("tails", np.asarray(self.tails, dtype=np.int64)),
                            ("heads", np.asarray(self.heads, dtype=np.int64)),
                            ("a", np.asarray(self.a, dtype=float)),
                            ("b", np.asarray(self.b, dtype=float)),
                            ("h", np.asarray(self.h, dtype=float)),
                            ("virtual", virtual)):
            if value.shape != (n_e,):
                raise NetworkValidationError(f"{name} must have shape ({n_e},), got {value.shape}")
            value = value.copy()
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "nodes", tuple(int(v) for v in self.nodes))
        object.__setattr__(self, "charge_nodes", tuple(sorted(int(v) for v in self.charge_nodes)))
        object.__setattr__(self, "park_nodes", tuple(sorted(int(v) for v in self.park_nodes)))
        object.__setattr__(self, "_index", {v: k for k, v in enumerate(self.nodes)})
        if len(self._index) != len(self.nodes):
            raise NetworkValidationError("duplicate node labels")

        n_v = len(self.nodes)
        if n_e and (self.tails.min() < 0 or self.heads.min() < 0
                    or self.tails.max() >= n_v or self.heads.max() >= n_v):
            raise NetworkValidationError("edge endpoint outside node index range")
        if np.any(self.tails == self.heads):
            raise NetworkValidationError("self-loops are not allowed")
        if np.any(self.a <= 0):
            raise NetworkValidationError("free-flow coefficients a must be positive")
        if np.any(self.b < 0) or np.any(self.h < 0):
            raise NetworkValidationError("b and h must be non-negative")
        for label in self.charge_nodes + self.park_nodes:
            if label not in self._index:
                raise NetworkValidationError(f"facility node {label} is not in the network")
        for name, labels in (("_charge_idx", self.charge_nodes), ("_park_idx", self.park_nodes)):
            idx = np.array([self._index[v] for v in labels], dtype=np.int64)
            idx.setflags(write=False)
            object.__setattr__(self, name, idx)
        unreachable = unreachable_pairs(n_v, self.tails, self.heads, limit=10)
        if unreachable:
            pairs = [(self.nodes[u], self.nodes[v]) for u, v in unreachable]
            raise ConnectivityError(f"network is not strongly connected, e.g. unreachable pairs {pairs}", pairs)

    # sizes -----------------------------------------------------------------
    @property
    def n_v(self) -> int:
        return len(self.nodes)

    @property
    def n_e(self) -> int:
        return len(self.tails)

    @property
    def n_c(self) -> int:
        return len(self.charge_nodes)

    @property
    def n_p(self) -> int:
        return len(self.park_nodes)

    def index(self, label: int) -> int:
        try:
            return self._index[int(label)]
        except KeyError:
            raise NetworkValidationError(f"node {label} is not in the network") from None

    @property
    def charge_idx(self) -> np.ndarray:
        return self._charge_idx

    @property
    def park_idx(self) -> np.ndarray:
        return self._park_idx

    def incidence(self) -> np.ndarray:
        """Node-edge matrix with +1 at the head and -1 at the tail of each edge."""
        inc = np.zeros((self.n_v, self.n_e))
        cols = np.arange(self.n_e)
        inc[self.heads, cols] += 1.0
        inc[self.tails, cols] -= 1.0
        return inc

    def latency(self, sigma: np.ndarray) -> np.ndarray:
        return self.a + self.b * (self.h + sigma)

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "nodes": list(self.nodes),
            "edges": [
                {"tail": self.nodes[t], "head": self.nodes[hd], "a": float(a), "b": float(b),
                 "h": float(h), "virtual": bool(vr)}
                for t, hd, a, b, h, vr in zip(self.tails, self.heads, self.a, self.b, self.h, self.virtual)
            ],
            "charge_nodes": list(self.charge_nodes),
            "park_nodes": list(self.park_nodes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "RoadNetwork":
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise NetworkValidationError(f"unsupported network schema version {version!r}")
        nodes = [int(v) for v in doc["nodes"]]
        index = {v: k for k, v in enumerate(nodes)}
        edges = doc["edges"]
        try:
            tails = [index[int(e["tail"])] for e in edges]
            heads = [index[int(e["head"])] for e in edges]
        except KeyError as exc:
            raise NetworkValidationError(f"edge references unknown node {exc.args[0]}") from None
        return cls(
            nodes=tuple(nodes),
            tails=np.array(tails, dtype=np.int64),
            heads=np.array(heads, dtype=np.int64),
            a=np.array([e["a"] for e in edges], dtype=float),
            b=np.array([e["b"] for e in edges], dtype=float),
            h=np.array([e.get("h", 0.0) for e in edges], dtype=float),
            charge_nodes=tuple(doc.get("charge_nodes", ())),
            park_nodes=tuple(doc.get("park_nodes", ())),
            virtual=np.array([e.get("virtual", False) for e in edges], dtype=bool),
        )

    @classmethod
    def from_json(cls, text: str) -> "RoadNetwork":
        return cls.from_dict(json.loads(text))


def _weight_matrix(n_v: int, tails, heads, weights) -> csr_matrix:
    """Sparse adjacency keeping the cheapest of any parallel edges."""
    best: dict[tuple[int, int], float] = {}
    for t, hd, w in zip(tails, heads, weights):
        key = (int(t), int(hd))
        if key not in best or w < best[key]:
            best[key] = float(w)
    if not best:
        return csr_matrix((n_v, n_v))
    rows, cols = zip(*best.keys())
    return csr_matrix((list(best.values()), (rows, cols)), shape=(n_v, n_v))


def unreachable_pairs(n_v: int, tails, heads, limit: int | None = None) -> list[tuple[int, int]]:
    """Ordered index pairs ``(u, v)`` with no directed path ``u -> v``."""
    if n_v <= 1:
        return []
    adj = _weight_matrix(n_v, tails, heads, np.ones(len(tails)))
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp == 1:
        return []
    reach = np.isfinite(dijkstra(adj, unweighted=True))
    pairs = [(int(u), int(v)) for u, v in zip(*np.nonzero(~reach))]
    return pairs if limit is None else pairs[:limit]


def free_flow_distances(network: RoadNetwork, targets: Iterable[int]) -> np.ndarray:
    """Shortest free-flow travel time from every node to each target label.

    Entry ``[j, k]`` is the time from node index ``j`` to ``targets[k]``.
    """
    targets = [network.index(t) for t in targets]
    if not targets:
        return np.zeros((network.n_v, 0))
    # distances *to* the targets: run Dijkstra on the reversed graph
    reversed_adj = _weight_matrix(network.n_v, network.heads, network.tails, network.a)
    dist = dijkstra(reversed_adj, directed=True, indices=targets)
    return dist.T


# ---------------------------------------------------------------------------
# Assembly from raw TNTP rows
# ---------------------------------------------------------------------------

def _reference_flows(raw: Sequence[RawTntpEdge], policy) -> np.ndarray:
    if isinstance(policy, (int, float)):
        return np.full(len(raw), float(policy))
    if policy == "capacity":
        return np.array([e.capacity for e in raw])
    if policy == "recorded":
        return np.array([e.recorded_flow or 0.0 for e in raw])
    if policy == "zero":
        return np.zeros(len(raw))
    raise ValueError(f"unknown reference flow policy {policy!r}")


def build_network(
    raw: Sequence[RawTntpEdge],
    n_nodes: int,
    charge_nodes: Iterable[int],
    park_nodes: Iterable[int],
    reference_flow_policy="capacity",
    background_flow_fraction: float = 0.8,
    node_subset: Sequence[int] | None = None,
    augment: bool = True,
) -> RoadNetwork:
    """Linearize raw TNTP links into a :class:`RoadNetwork`.

    With ``node_subset`` the induced subgraph is taken; if it is not strongly
    connected and ``augment`` is set, virtual edges carrying the aggregate
    latency of the full-network shortest path are added until it is.
    """
    if not 0.0 <= background_flow_fraction <= 1.0:
        raise ValueError("background_flow_fraction must lie in [0, 1]")
    charge_nodes, park_nodes = list(charge_nodes), list(park_nodes)
    labels = list(range(1, n_nodes + 1))
    index = {v: k for k, v in enumerate(labels)}
    ref = _reference_flows(raw, reference_flow_policy)
    lin = [linearize_latency(e, r) for e, r in zip(raw, ref)]
    tails = np.array([index[e.tail] for e in raw], dtype=np.int64)
    heads = np.array([index[e.head] for e in raw], dtype=np.int64)
    a = np.array([x[0] for x in lin])
    b = np.array([x[1] for x in lin])
    h = background_flow_fraction * np.array([e.recorded_flow or 0.0 for e in raw])

    keep_labels = labels if node_subset is None else sorted(int(v) for v in node_subset)
    for v in charge_nodes + park_nodes:
        if v not in keep_labels or v not in index:
            raise NetworkValidationError(f"facility node {v} is not in the network")

    if node_subset is not None:
        for v in keep_labels:
            if v not in index:
                raise NetworkValidationError(f"subset node {v} is not in the network")
        keep = np.array([index[v] for v in keep_labels])
        remap = -np.ones(n_nodes, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        mask = (remap[tails] >= 0) & (remap[heads] >= 0)
        full = (tails, heads, a, b, h)
        tails, heads = remap[tails[mask]], remap[heads[mask]]
        a, b, h = a[mask], b[mask], h[mask]
        virtual = np.zeros(len(tails), dtype=bool)
        if augment:
            tails, heads, a, b, h, virtual = _augment(n_nodes, full, keep, tails, heads, a, b, h, virtual)
    else:
        virtual = np.zeros(len(tails), dtype=bool)

    n_v = len(keep_labels)
    if not augment or node_subset is None:
        missing = unreachable_pairs(n_v, tails, heads)
        if missing:
            pairs = [(keep_labels[u], keep_labels[v]) for u, v in missing]
            raise ConnectivityError(f"network is not strongly connected; unreachable pairs: {pairs[:20]}", pairs)
    return RoadNetwork(
        nodes=tuple(keep_labels), tails=tails, heads=heads, a=a, b=b, h=h,
        charge_nodes=tuple(charge_nodes), park_nodes=tuple(park_nodes), virtual=virtual,
    )


def _augment(n_nodes, full, keep, tails, heads, a, b, h, virtual):
    f_tails, f_heads, f_a, f_b, f_h = full
    adj = _weight_matrix(n_nodes, f_tails, f_heads, f_a)
    dist, pred = dijkstra(adj, directed=True, indices=keep, return_predecessors=True)
    sub_dist = dist[:, keep]
    n_keep = len(keep)
    # cheapest parallel edge lookup in the full network
    cheapest: dict[tuple[int, int], int] = {}
    for k, (t, hd) in enumerate(zip(f_tails, f_heads)):
        key = (int(t), int(hd))
        if key not in cheapest or f_a[k] < f_a[cheapest[key]]:
            cheapest[key] = k
    tails, heads, a, b, h, virtual = map(list, (tails, heads, a, b, h, virtual))
    while True:
        missing = unreachable_pairs(n_keep, tails, heads)
        if not missing:
            break
        u, v = min(missing, key=lambda p: (sub_dist[p[0], p[1]], p))
        if not np.isfinite(sub_dist[u, v]):
            raise ConnectivityError("full network does not connect the requested subset", [(u, v)])
        path_edges = []
        node = keep[v]
        while node != keep[u]:
            prev = pred[u, node]
            path_edges.append(cheapest[(int(prev), int(node))])
            node = prev
        pa, pb = f_a[path_edges].sum(), f_b[path_edges].sum()
        ph = float(f_b[path_edges] @ f_h[path_edges] / pb) if pb > 0 else 0.0
        tails.append(u), heads.append(v), a.append(pa), b.append(pb), h.append(ph), virtual.append(True)
    return (np.array(tails, dtype=np.int64), np.array(heads, dtype=np.int64), np.array(a, dtype=float),
            np.array(b, dtype=float), np.array(h, dtype=float), np.array(virtual, dtype=bool))


def make_network(
    edges: Sequence[tuple[int, int, float, float, float]],
    charge_nodes: Iterable[int] = (),
    park_nodes: Iterable[int] = (),
    nodes: Sequence[int] | None = None,
) -> RoadNetwork:
    """Convenience constructor from ``(tail, head, a, b, h)`` label tuples."""
    if nodes is None:
        nodes = sorted({e[0] for e in edges} | {e[1] for e in edges})
    index = {v: k for k, v in enumerate(nodes)}
    return RoadNetwork(
        nodes=tuple(nodes),
        tails=np.array([index[e[0]] for e in edges], dtype=np.int64),
        heads=np.array([index[e[1]] for e in edges], dtype=np.int64),
        a=np.array([e[2] for e in edges], dtype=float),
        b=np.array([e[3] for e in edges], dtype=float),
        h=np.array([e[4] for e in edges], dtype=float),
        charge_nodes=tuple(charge_nodes),
        park_nodes=tuple(park_nodes),
    )
