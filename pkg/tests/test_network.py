import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traffic_incentives.network import (ConnectivityError, NetworkValidationError, RawTntpEdge, RoadNetwork,
                                        TntpParseError, UnsupportedExponentError, build_network,
                                        free_flow_distances, linearize_latency, load_tntp, make_network,
                                        write_tntp)

HEADER = """<NUMBER OF ZONES> 4
<NUMBER OF NODES> 4
<FIRST THRU NODE> 1
<NUMBER OF LINKS> 2
<END OF METADATA>
~ init_node term_node capacity length free_flow_time b power speed toll link_type ;
"""


def test_load_minimal_file():
    text = HEADER + "\t1\t2\t100\t1\t0.5\t0.15\t4\t0\t0\t1\t;\n\t2\t3\t200\t1\t0.7\t0.15\t4\t0\t0\t1\t;\n"
    edges, n = load_tntp(text)
    assert n == 4
    assert [(e.tail, e.head) for e in edges] == [(1, 2), (2, 3)]
    assert edges[1].capacity == 200 and edges[1].free_flow_time == 0.7


def test_comment_lines_skipped_and_flow_attached():
    text = HEADER + "~ a comment\n\t1\t2\t100\t1\t0.5\t0.15\t4\t0\t0\t1\t;\n\t2\t3\t200\t1\t0.7\t0.15\t4\t0\t0\t1\t;\n"
    flow = "From To Volume Cost\n1 2 40.5 0\n2 3 10 0\n"
    edges, _ = load_tntp(text, flow)
    assert edges[0].recorded_flow == 40.5


def test_zero_capacity_rejected():
    text = HEADER + "\t1\t2\t0\t1\t0.5\t0.15\t4\t0\t0\t1\t;\n\t2\t3\t200\t1\t0.7\t0.15\t4\t0\t0\t1\t;\n"
    with pytest.raises(NetworkValidationError):
        load_tntp(text)


def test_missing_tag_named():
    text = HEADER.replace("<NUMBER OF LINKS> 2\n", "")
    with pytest.raises(TntpParseError, match="NUMBER OF LINKS"):
        load_tntp(text)


def test_non_numeric_field_reports_line():
    text = HEADER + "\t1\t2\tabc\t1\t0.5\t0.15\t4\t0\t0\t1\t;\n"
    with pytest.raises(TntpParseError, match="line"):
        load_tntp(text)


def test_node_out_of_range():
    text = HEADER + "\t1\t9\t100\t1\t0.5\t0.15\t4\t0\t0\t1\t;\n\t2\t3\t200\t1\t0.7\t0.15\t4\t0\t0\t1\t;\n"
    with pytest.raises(NetworkValidationError):
        load_tntp(text)


def _edge(fft=1.0, k=0.15, p=4.0, cap=100.0):
    return RawTntpEdge(1, 2, cap, 1.0, fft, k, p)


def test_linearize_at_zero_flow():
    assert linearize_latency(_edge(), 0.0) == (1.0, 0.0)


def test_linearize_at_capacity():
    # t(100) = 1.15, t'(100) = 0.15 * 4 / 100
    a, b = linearize_latency(_edge(), 100.0)
    assert b == pytest.approx(0.006, abs=1e-15)
    assert a == pytest.approx(1.15 - 0.6, abs=1e-14)


def test_linearize_affine_edge_exact():
    for ref in (0.0, 10.0, 1e4):
        assert linearize_latency(_edge(fft=2.0, p=1.0, cap=50.0), ref) == (2.0, 0.006)


def test_linearize_rejects_small_power():
    with pytest.raises(UnsupportedExponentError):
        linearize_latency(_edge(p=0.5), 1.0)


@settings(max_examples=60, deadline=None)
@given(fft=st.floats(0.01, 10), k=st.floats(0.0, 2.0), p=st.floats(1.0, 6.0), cap=st.floats(1.0, 1e4),
       x=st.floats(0.0, 2.0))
def test_linearization_tangent(fft, k, p, cap, x):
    e = _edge(fft, k, p, cap)
    ref = x * cap
    a, b = linearize_latency(e, ref)
    if a > 1e-6 * fft:
        assert a + b * ref == pytest.approx(e.bpr_time(ref), rel=1e-9)
        h = max(1e-4 * ref, 1e-6)
        t0, t_up = e.bpr_time(ref), e.bpr_time(ref + h)
        # cancellation error of a difference quotient is about eps * time / h
        roundoff = 4 * np.finfo(float).eps * t_up / h
        # BPR is convex: the tangent slope is at most the forward secant
        assert b <= (t_up - t0) / h * (1 + 1e-9) + roundoff
        if ref > h:
            t_dn = e.bpr_time(ref - h)
            assert b >= (t0 - t_dn) / h * (1 - 1e-9) - roundoff
            if h == 1e-4 * ref:
                # a relative step is small enough for the central quotient to be accurate
                assert b == pytest.approx((t_up - t_dn) / (2 * h), rel=1e-4, abs=1e-12 + roundoff)
    assert b >= 0 and a > 0


def test_affine_round_trip():
    raw = [RawTntpEdge(1, 2, 50.0, 1.0, 2.0, 0.15, 1.0, 10.0), RawTntpEdge(2, 1, 80.0, 1.0, 0.5, 0.3, 1.0, 4.0)]
    edges, n = load_tntp(write_tntp(raw, 2))
    net = build_network(edges, n, [1], [2])
    np.testing.assert_allclose(net.a, [2.0, 0.5], atol=1e-12)
    np.testing.assert_allclose(net.b, [2.0 * 0.15 / 50, 0.5 * 0.3 / 80], atol=1e-12)


def test_three_node_ring():
    raw = [RawTntpEdge(1, 2, 10, 1, 1, 0.15, 1), RawTntpEdge(2, 3, 10, 1, 1, 0.15, 1),
           RawTntpEdge(3, 1, 10, 1, 1, 0.15, 1)]
    net = build_network(raw, 3, [1], [2])
    assert net.n_e == 3 and net.n_v == 3
    assert net.charge_nodes == (1,) and net.park_nodes == (2,)


def test_background_flow_fraction():
    raw = [RawTntpEdge(1, 2, 10, 1, 1, 0.15, 1, 100.0), RawTntpEdge(2, 1, 10, 1, 1, 0.15, 1, 50.0)]
    net = build_network(raw, 2, [1], [2], background_flow_fraction=0.8)
    np.testing.assert_allclose(net.h, [80.0, 40.0])


def test_unknown_facility_rejected():
    raw = [RawTntpEdge(1, 2, 10, 1, 1, 0.15, 1), RawTntpEdge(2, 1, 10, 1, 1, 0.15, 1)]
    with pytest.raises(NetworkValidationError):
        build_network(raw, 2, [99], [2])


def test_not_strongly_connected():
    raw = [RawTntpEdge(1, 2, 10, 1, 1, 0.15, 1), RawTntpEdge(2, 3, 10, 1, 1, 0.15, 1)]
    with pytest.raises(ConnectivityError):
        build_network(raw, 3, [1], [2])


def test_subset_augmentation_makes_connected():
    # ring 1->2->3->4->1; keeping {1, 2, 4} loses 2->3->4, which is replaced by a virtual edge
    raw = [RawTntpEdge(t, h, 10, 1, 1.0, 0.15, 1, 5.0) for t, h in [(1, 2), (2, 3), (3, 4), (4, 1)]]
    net = build_network(raw, 4, [1], [2], node_subset=[1, 2, 4])
    assert net.n_v == 3
    assert net.virtual.any()
    d = free_flow_distances(net, [4])
    assert d[net.index(2), 0] == pytest.approx(2.0)
    with pytest.raises(ConnectivityError):
        build_network(raw, 4, [1], [2], node_subset=[1, 2, 4], augment=False)


def test_single_edge_distance():
    net = make_network([(1, 2, 0.2, 0, 0), (2, 1, 0.5, 0, 0)])
    d = free_flow_distances(net, [1, 2])
    assert d[net.index(1), 1] == pytest.approx(0.2)
    assert d[net.index(1), 0] == 0 and d[net.index(2), 1] == 0


def test_two_hop_shortcut():
    edges = [(1, 4, 1.0, 0, 0), (1, 2, 0.2, 0, 0), (2, 3, 0.2, 0, 0), (3, 4, 0.2, 0, 0), (4, 1, 1.0, 0, 0),
             (2, 4, 0.5, 0, 0), (3, 1, 0.1, 0, 0)]
    net = make_network(edges)
    d = free_flow_distances(net, [4])[net.index(1), 0]
    # enumerate simple paths 1 -> 4
    adj = {}
    for t, h, a, _, _ in edges:
        adj.setdefault(t, []).append((h, a))
    best = np.inf
    stack = [(1, 0.0, {1})]
    while stack:
        v, cost, seen = stack.pop()
        if v == 4:
            best = min(best, cost)
            continue
        for w, a in adj.get(v, []):
            if w not in seen:
                stack.append((w, cost + a, seen | {w}))
    assert d == pytest.approx(best) == pytest.approx(0.6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    n = 6
    edges = [(v, v % n + 1, rng.uniform(0.1, 1), 0, 0) for v in range(1, n + 1)]
    edges += [(int(t), int(h), rng.uniform(0.1, 1), 0, 0) for t, h in rng.integers(1, n + 1, (8, 2)) if t != h]
    net = make_network(edges, nodes=list(range(1, n + 1)))
    D = free_flow_distances(net, list(range(1, n + 1)))
    assert np.all(np.diag(D) == 0)
    for u, v, w in itertools.product(range(n), repeat=3):
        assert D[u, w] <= D[u, v] + D[v, w] + 1e-12


def test_json_round_trip():
    net = make_network([(1, 2, 0.2, 0.01, 3), (2, 1, 0.3, 0.02, 0)], charge_nodes=[1], park_nodes=[1, 2])
    back = RoadNetwork.from_json(net.to_json())
    np.testing.assert_array_equal(back.a, net.a)
    np.testing.assert_array_equal(back.h, net.h)
    assert back.nodes == net.nodes and back.park_nodes == net.park_nodes


def test_json_schema_version_checked():
    doc = make_network([(1, 2, 0.2, 0.01, 3), (2, 1, 0.3, 0.02, 0)]).to_dict()
    doc["schema_version"] = 99
    with pytest.raises(NetworkValidationError):
        RoadNetwork.from_dict(doc)


def test_invalid_coefficients():
    with pytest.raises(NetworkValidationError):
        make_network([(1, 2, 0.0, 0.01, 0), (2, 1, 0.3, 0.02, 0)])
    with pytest.raises(NetworkValidationError):
        make_network([(1, 2, 0.1, -0.01, 0), (2, 1, 0.3, 0.02, 0)])


def test_anaheim_counts():
    from pathlib import Path
    path = Path(__file__).parent / "data" / "Anaheim_net.tntp"
    if not path.exists():
        pytest.skip("Anaheim network file not available offline")
    edges, n = load_tntp(path.read_text())
    rows = [ln for ln in path.read_text().splitlines() if ln.strip().endswith(";") and not ln.startswith("~")]
    assert n == 416 and len(edges) == 914 == len(rows)
