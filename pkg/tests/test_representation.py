import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgraph.errors import ConfigError, DataError, SchemaError
from fedgraph.graph import (
    AttributeKind,
    AttributeSchema,
    build_graph,
    local_attribute_stats,
    merge_attribute_stats,
)
from fedgraph.representation import (
    AttributeHistogram,
    FederatedRepresentation,
    FilterCondition,
    HistogramSpec,
    assemble,
    build_histogram,
    export_representation,
    load_representation,
    numeric_bin_edges,
    reconstruct_structure,
    reconstruction_target,
)

SCHEMA = AttributeSchema.of(("age", AttributeKind.NUMERIC), ("team", AttributeKind.CATEGORICAL))


def _graph(values):
    nodes = [f"n{i}" for i in range(len(values))]
    attrs = {n: (float(v), "t0") for n, v in zip(nodes, values)}
    return build_graph(nodes, [], attributes=attrs, schema=SCHEMA)


def _merged(g):
    return merge_attribute_stats(SCHEMA, [local_attribute_stats(g, SCHEMA)])


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------


def test_binning_right_closed_upper_bin():
    g = _graph([1, 5, 9])
    counts, shell = build_histogram(
        g, HistogramSpec("age", 2), _merged(g), bin_edges=[0.0, 5.0, 10.0]
    )
    assert counts.tolist() == [1, 2]
    assert shell.bin_edges == (0.0, 5.0, 10.0)


def test_filter_matching_nothing_gives_zeros():
    g = _graph([1, 5, 9])
    filt = FilterCondition(numeric_ranges={"age": (100.0, 200.0)})
    counts, _ = build_histogram(
        g, HistogramSpec("age", 2), _merged(g), filt, bin_edges=[0.0, 5.0, 10.0]
    )
    assert counts.tolist() == [0, 0]


def test_degree_histogram_of_triangle():
    g = build_graph(
        ["a", "b", "c"],
        [("a", "b"), ("b", "c"), ("a", "c")],
        attributes={n: (1.0, "t0") for n in "abc"},
        schema=SCHEMA,
    )
    counts, shell = build_histogram(
        g, HistogramSpec("degree", 3), _merged(g), bin_edges=[0.0, 1.0, 2.0, 3.0]
    )
    assert counts.tolist() == [0, 0, 3]
    assert shell.kind == "metric"


def test_histogram_total_equals_passing_nonmissing():
    nodes = [f"n{i}" for i in range(10)]
    attrs = {
        n: (float(i) if i % 3 else None, "t0") for i, n in enumerate(nodes)
    }
    g = build_graph(nodes, [], attributes=attrs, schema=SCHEMA)
    merged = _merged(g)
    filt = FilterCondition(numeric_ranges={"age": (2.0, 8.0)})
    counts, _ = build_histogram(g, HistogramSpec("age", 4), merged, filt)
    passing = sum(
        1
        for n in nodes
        if g.attributes[n][0] is not None and 2.0 <= g.attributes[n][0] <= 8.0
    )
    assert counts.sum() == passing


def test_filter_unknown_attribute_rejected():
    g = _graph([1.0])
    filt = FilterCondition(numeric_ranges={"nope": (0.0, 1.0)})
    with pytest.raises(SchemaError):
        build_histogram(g, HistogramSpec("age", 2), _merged(g), filt)


def test_text_attribute_not_countable():
    schema = AttributeSchema.of(("bio", AttributeKind.TEXT))
    g = build_graph(["a"], [], attributes={"a": ("hello",)}, schema=schema)
    merged = merge_attribute_stats(schema, [local_attribute_stats(g, schema)])
    with pytest.raises(ConfigError):
        build_histogram(g, HistogramSpec("bio", 2), merged)


def test_categorical_histogram_uses_merged_categories():
    g = build_graph(
        ["a", "b"],
        [],
        attributes={"a": (1.0, "red"), "b": (1.0, "blue")},
        schema=SCHEMA,
    )
    merged = _merged(g)
    counts, shell = build_histogram(g, HistogramSpec("team"), merged)
    assert shell.categories == ("blue", "red")
    assert counts.tolist() == [1, 1]


def test_numeric_bin_edges_degenerate_range():
    edges = numeric_bin_edges(4.0, 4.0, 3)
    assert len(edges) == 4
    assert all(b > a for a, b in zip(edges, edges[1:]))


# ---------------------------------------------------------------------------
# Structure reconstruction vs the full-sort oracle
# ---------------------------------------------------------------------------


def brute_force_nearest_pairs(points, count, metric="euclidean"):
    n = len(points)
    scored = []
    for i in range(n):
        for j in range(i + 1, n):
            if metric == "euclidean":
                d = float(np.linalg.norm(points[i] - points[j]))
            else:
                ni = np.linalg.norm(points[i])
                nj = np.linalg.norm(points[j])
                if ni == 0 or nj == 0:
                    d = 1.0
                else:
                    d = 1.0 - float(points[i] @ points[j] / (ni * nj))
            scored.append((d, i, j))
    scored.sort()
    return sorted((i, j) for _, i, j in scored[:count])


def test_three_collinear_points():
    points = np.array([[0.0], [1.0], [3.0]])
    assert reconstruct_structure(points, 2) == [(0, 1), (1, 2)]


def test_full_edge_budget_gives_complete_graph():
    points = np.random.default_rng(0).normal(size=(6, 3))
    edges = reconstruct_structure(points, 15)
    assert len(edges) == 15


def test_reconstruction_matches_oracle_50_points():
    points = np.random.default_rng(3).normal(size=(50, 8))
    assert reconstruct_structure(points, 100) == brute_force_nearest_pairs(points, 100)


def test_reconstruction_matches_oracle_with_ties():
    # Grid points produce many duplicate distances; ties must break on the
    # lexicographic row pair exactly as the oracle does.
    xs, ys = np.meshgrid(np.arange(5.0), np.arange(5.0))
    points = np.stack([xs.ravel(), ys.ravel()], axis=1)
    for count in (10, 40, 61):
        assert reconstruct_structure(points, count) == brute_force_nearest_pairs(points, count)


def test_reconstruction_cosine_matches_oracle():
    points = np.random.default_rng(9).normal(size=(30, 5))
    assert reconstruct_structure(points, 40, metric="cosine") == brute_force_nearest_pairs(
        points, 40, metric="cosine"
    )


@given(st.integers(0, 10_000), st.integers(2, 20), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_reconstruction_oracle_property(seed, n, d):
    points = np.random.default_rng(seed).normal(size=(n, d))
    count = min(n * (n - 1) // 2, seed % 12 + 1)
    assert reconstruct_structure(points, count) == brute_force_nearest_pairs(points, count)


def test_reconstruction_budget_validation():
    points = np.zeros((3, 2))
    with pytest.raises(DataError):
        reconstruct_structure(points, 4)
    assert reconstruct_structure(points, 0) == []


def test_reconstruction_target_mean():
    assert reconstruction_target([10, 20, 33]) == 21


# ---------------------------------------------------------------------------
# Assembly and export
# ---------------------------------------------------------------------------


def _toy_representation():
    rng = np.random.default_rng(1)
    basic = rng.normal(size=(8, 4))
    reduced = rng.normal(size=(8, 4))
    hist = AttributeHistogram(
        target="age",
        kind="numeric",
        counts=np.array([2.0, 6.0]),
        bin_edges=(0.0, 1.0, 2.0),
        mechanism="none",
    )
    return assemble(
        basic=basic,
        reduced=reduced,
        histograms=[hist],
        struc_table=basic,
        target_edges=5,
        round_no=7,
        metadata={"config_hash": "ab" * 32},
    )


def test_assemble_shapes():
    rep = _toy_representation()
    assert rep.w_emb.shape == (8, 8)
    assert len(rep.w_struc) == 5
    assert rep.w_att[0].counts.tolist() == [2.0, 6.0]


def test_representation_rejects_duplicate_edges():
    with pytest.raises(DataError):
        FederatedRepresentation(
            w_emb=np.zeros((2, 2)), w_att=[], w_struc=[(0, 1), (0, 1)]
        )


def test_export_round_trip(tmp_path):
    rep = _toy_representation()
    export_representation(rep, tmp_path / "rep")
    loaded = load_representation(tmp_path / "rep")
    assert loaded.round_no == 7
    assert loaded.w_struc == rep.w_struc
    assert np.allclose(loaded.w_emb, rep.w_emb, atol=1e-6)  # float32 container
    assert loaded.w_att[0].to_dict() == rep.w_att[0].to_dict()


def test_export_deterministic_bytes(tmp_path):
    rep = _toy_representation()
    export_representation(rep, tmp_path / "a")
    export_representation(rep, tmp_path / "b")
    for name in ("embedding.bin", "edges.txt", "histograms.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
