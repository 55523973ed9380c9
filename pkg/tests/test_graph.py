import io
from collections import Counter
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgraph.errors import DataError, SchemaError
from fedgraph.graph import (
    AttributeKind,
    AttributeSchema,
    TopologyMetricKind,
    build_graph,
    load_graph,
    local_attribute_stats,
    merge_attribute_stats,
    topology_metric,
)

SCHEMA2 = AttributeSchema.of(("age", "numeric"), ("color", "categorical"))


def _nodes_csv(rows):
    return "id,age,color\n" + "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def test_load_minimal_graph():
    g, report = load_graph(
        io.StringIO("a b\n"),
        io.StringIO(_nodes_csv(["a,1,red", "b,2,blue"])),
        SCHEMA2,
    )
    assert g.node_count == 2
    assert g.edge_count == 1
    assert report.self_loops_dropped == 0
    assert report.duplicate_edges_dropped == 0


def test_load_drops_self_loops_and_duplicates():
    g, report = load_graph(
        io.StringIO("a a\na b\na,b\n"),
        io.StringIO(_nodes_csv(["a,1,red", "b,2,blue"])),
        SCHEMA2,
    )
    assert g.edge_count == 1
    assert report.self_loops_dropped == 1
    assert report.duplicate_edges_dropped == 1


def test_load_dangling_endpoint_rejected():
    with pytest.raises(DataError, match="absent from node table"):
        load_graph(
            io.StringIO("a c\n"),
            io.StringIO(_nodes_csv(["a,1,red", "b,2,blue"])),
            SCHEMA2,
        )


def test_load_schema_mismatch():
    with pytest.raises(SchemaError):
        load_graph(
            io.StringIO("a b\n"),
            io.StringIO("id,age\na,1\nb,2\n"),
            SCHEMA2,
        )


def test_load_unparseable_numeric():
    with pytest.raises(DataError, match="unparseable numeric"):
        load_graph(
            io.StringIO("a b\n"),
            io.StringIO(_nodes_csv(["a,xyz,red", "b,2,blue"])),
            SCHEMA2,
        )


def test_missing_values_are_none():
    g, _ = load_graph(
        io.StringIO("a b\n"),
        io.StringIO(_nodes_csv(["a,,red", "b,NA,blue"])),
        SCHEMA2,
    )
    assert g.attributes["a"][0] is None
    assert g.attributes["b"][0] is None


# ---------------------------------------------------------------------------
# Topology metrics against stated values
# ---------------------------------------------------------------------------


def _cycle(n):
    nodes = [f"n{i}" for i in range(n)]
    return build_graph(nodes, [(nodes[i], nodes[(i + 1) % n]) for i in range(n)])


def test_pagerank_uniform_on_cycle():
    ranks = topology_metric(_cycle(5), TopologyMetricKind.PAGERANK)
    for value in ranks.values():
        assert value == pytest.approx(0.2, abs=1e-9)


def test_pagerank_sums_to_one():
    g = build_graph(["a", "b", "c", "d"], [("a", "b"), ("b", "c")])  # d isolated
    ranks = topology_metric(g, TopologyMetricKind.PAGERANK)
    assert sum(ranks.values()) == pytest.approx(1.0, abs=1e-6)


def test_clustering_coefficient_triangle():
    g = build_graph(["a", "b", "c"], [("a", "b"), ("b", "c"), ("a", "c")])
    cc = topology_metric(g, TopologyMetricKind.CLUSTERING_COEFFICIENT)
    assert all(v == 1.0 for v in cc.values())


def test_clustering_coefficient_low_degree_is_zero():
    g = build_graph(["a", "b"], [("a", "b")])
    cc = topology_metric(g, TopologyMetricKind.CLUSTERING_COEFFICIENT)
    assert cc == {"a": 0.0, "b": 0.0}


def test_betweenness_path():
    g = build_graph(["a", "b", "c", "d"], [("a", "b"), ("b", "c"), ("c", "d")])
    bc = topology_metric(g, TopologyMetricKind.BETWEENNESS)
    assert bc == {"a": 0.0, "b": 2.0, "c": 2.0, "d": 0.0}


def test_knn_degree_star():
    leaves = [f"l{i}" for i in range(4)]
    g = build_graph(["hub"] + leaves, [("hub", leaf) for leaf in leaves])
    knn = topology_metric(g, TopologyMetricKind.KNN_DEGREE)
    assert knn["hub"] == pytest.approx(1.0)
    for leaf in leaves:
        assert knn[leaf] == pytest.approx(4.0)


def test_knn_degree_isolated_is_zero():
    g = build_graph(["a", "b", "c"], [("a", "b")])
    knn = topology_metric(g, TopologyMetricKind.KNN_DEGREE)
    assert knn["c"] == 0.0


def test_eigenvector_unit_norm_and_symmetry():
    g = _cycle(6)
    ev = topology_metric(g, TopologyMetricKind.EIGENVECTOR)
    values = np.array(list(ev.values()))
    assert np.linalg.norm(values) == pytest.approx(1.0, abs=1e-6)
    assert values.std() < 1e-6  # symmetric graph: identical centrality


def test_eigenvector_converges_on_bipartite():
    g = build_graph(["a", "b"], [("a", "b")])
    ev = topology_metric(g, TopologyMetricKind.EIGENVECTOR)
    assert ev["a"] == pytest.approx(ev["b"], abs=1e-8)


# ---------------------------------------------------------------------------
# Brute-force betweenness oracle
# ---------------------------------------------------------------------------


def _all_shortest_paths(adj, source, target):
    from collections import deque

    dist = {source: 0}
    queue = deque([source])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w not in dist:
                dist[w] = dist[v] + 1
                queue.append(w)
    if target not in dist:
        return []
    paths = []

    def extend(path):
        tail = path[-1]
        if tail == target:
            paths.append(path)
            return
        for w in adj[tail]:
            if dist.get(w) == dist[tail] + 1 and dist[w] <= dist[target]:
                extend(path + [w])

    extend([source])
    return paths


def brute_force_betweenness(g):
    adj = g.adjacency()
    centrality = {v: 0.0 for v in g.node_ids}
    for s, t in combinations(g.node_ids, 2):
        paths = _all_shortest_paths(adj, s, t)
        if not paths:
            continue
        interior = Counter(v for path in paths for v in path[1:-1])
        for v, count in interior.items():
            centrality[v] += count / len(paths)
    return centrality


def random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    nodes = [f"n{i}" for i in range(n)]
    edges = [
        (nodes[i], nodes[j])
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < p
    ]
    return build_graph(nodes, edges)


@pytest.mark.parametrize("seed", range(20))
def test_betweenness_matches_bruteforce_random(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    g = random_graph(n, float(rng.uniform(0.2, 0.9)), seed + 100)
    expected = brute_force_betweenness(g)
    actual = topology_metric(g, TopologyMetricKind.BETWEENNESS)
    for node in g.node_ids:
        assert actual[node] == pytest.approx(expected[node], abs=1e-9)


def test_degree_sum_is_twice_edges():
    g = random_graph(12, 0.3, 7)
    degrees = topology_metric(g, TopologyMetricKind.DEGREE)
    assert sum(degrees.values()) == 2 * g.edge_count


@given(st.integers(2, 7), st.floats(0.1, 0.9), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_metrics_permutation_equivariant(n, p, seed):
    g = random_graph(n, p, seed)
    mapping = {node: f"z{node[::-1]}x" for node in g.node_ids}
    relabeled = build_graph(
        [mapping[v] for v in g.node_ids],
        [(mapping[u], mapping[v]) for u, v in g.edges],
    )
    for kind in TopologyMetricKind:
        original = topology_metric(g, kind)
        permuted = topology_metric(relabeled, kind)
        for node in g.node_ids:
            assert permuted[mapping[node]] == pytest.approx(original[node], abs=1e-8)


@given(st.integers(1, 8), st.floats(0.0, 1.0), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_pagerank_mass_conserved(n, p, seed):
    g = random_graph(n, p, seed)
    ranks = topology_metric(g, TopologyMetricKind.PAGERANK)
    assert sum(ranks.values()) == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# Attribute statistics
# ---------------------------------------------------------------------------


def test_numeric_stats_min_max():
    g = build_graph(
        ["a", "b", "c"],
        [],
        attributes={"a": (3.0, "x"), "b": (7.0, "x"), "c": (5.0, "y")},
        schema=SCHEMA2,
    )
    stats = local_attribute_stats(g, SCHEMA2)
    entry = stats.entry("age")
    assert (entry.minimum, entry.maximum) == (3.0, 7.0)


def test_categorical_stats_value_set():
    g = build_graph(
        ["a", "b", "c"],
        [],
        attributes={"a": (1.0, "red"), "b": (1.0, "red"), "c": (1.0, "blue")},
        schema=SCHEMA2,
    )
    stats = local_attribute_stats(g, SCHEMA2)
    assert stats.entry("color").categories == frozenset({"red", "blue"})


def test_all_missing_flagged_empty():
    g = build_graph(
        ["a", "b"],
        [],
        attributes={"a": (None, "x"), "b": (None, "y")},
        schema=SCHEMA2,
    )
    stats = local_attribute_stats(g, SCHEMA2)
    assert stats.entry("age").empty


def test_merge_stats_across_parties():
    g1 = build_graph(
        ["a"], [], attributes={"a": (0.0, "red")}, schema=SCHEMA2
    )
    g2 = build_graph(
        ["b"], [], attributes={"b": (10.0, "blue")}, schema=SCHEMA2
    )
    merged = merge_attribute_stats(
        SCHEMA2,
        [local_attribute_stats(g1, SCHEMA2), local_attribute_stats(g2, SCHEMA2)],
    )
    age = merged.entry("age")
    assert (age.minimum, age.maximum) == (0.0, 10.0)
    assert merged.entry("color").categories == ("blue", "red")


def test_text_vocabulary_ranked_by_document_frequency():
    schema = AttributeSchema.of(("bio", AttributeKind.TEXT))
    g = build_graph(
        ["a", "b", "c"],
        [],
        attributes={
            "a": ("alpha beta",),
            "b": ("alpha gamma",),
            "c": ("alpha beta",),
        },
        schema=schema,
    )
    merged = merge_attribute_stats(schema, [local_attribute_stats(g, schema)], vocab_size=2)
    assert merged.entry("bio").vocabulary == ("alpha", "beta")
