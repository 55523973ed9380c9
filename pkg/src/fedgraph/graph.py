"""Local graph data model, ingestion, and per-node topology metrics.

Everything in this module operates strictly on one party's private graph;
nothing here ever sees data from another party.
"""

from __future__ import annotations

import csv
import io
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError, SchemaError

#: Tokens treated as an explicitly missing attribute value.
MISSING_TOKENS = frozenset({"", "na", "n/a", "nan", "null", "none", "?"})


class AttributeKind(str, Enum):
    CATEGORICAL = "categorical"
    NUMERIC = "numeric"
    TEXT = "text"


class TopologyMetricKind(str, Enum):
    DEGREE = "degree"
    BETWEENNESS = "betweenness"
    EIGENVECTOR = "eigenvector"
    PAGERANK = "pagerank"
    CLUSTERING_COEFFICIENT = "clustering_coefficient"
    KNN_DEGREE = "knn_degree"


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute declarations shared by every party in a run."""

    entries: tuple[tuple[str, AttributeKind], ...]

    def __post_init__(self) -> None:
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names: {names}")

    @property
    def attribute_count(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.entries)

    def kind_of(self, name: str) -> AttributeKind:
        for entry_name, kind in self.entries:
            if entry_name == name:
                return kind
        raise SchemaError(f"unknown attribute: {name!r}")

    def index_of(self, name: str) -> int:
        for i, (entry_name, _) in enumerate(self.entries):
            if entry_name == name:
                return i
        raise SchemaError(f"unknown attribute: {name!r}")

    @classmethod
    def of(cls, *entries: tuple[str, str | AttributeKind]) -> "AttributeSchema":
        return cls(tuple((name, AttributeKind(kind)) for name, kind in entries))


# An attribute value is a float (numeric), a str (categorical/text), or None
# when explicitly missing.
AttrValue = float | str | None


@dataclass(frozen=True)
class LocalGraph:
    """One party's private graph: nodes, undirected simple edges, attributes.

    Node IDs are public opaque strings; ``node_ids`` is sorted so that the
    local row order is deterministic. Immutable after construction.
    """

    node_ids: tuple[str, ...]
    edges: frozenset[tuple[str, str]]  # each pair stored sorted, no self-loops
    attributes: Mapping[str, tuple[AttrValue, ...]]
    schema: AttributeSchema

    def __post_init__(self) -> None:
        node_set = set(self.node_ids)
        if len(node_set) != len(self.node_ids):
            raise DataError("duplicate node IDs")
        if any(not n for n in self.node_ids):
            raise DataError("empty node ID")
        for u, v in self.edges:
            if u == v:
                raise DataError(f"self-loop on {u!r}")
            if u > v:
                raise DataError(f"edge {(u, v)} not stored in sorted order")
            if u not in node_set or v not in node_set:
                raise DataError(f"edge endpoint not in node set: {(u, v)}")
        for node in self.node_ids:
            tup = self.attributes.get(node)
            if tup is None or len(tup) != self.schema.attribute_count:
                raise SchemaError(f"node {node!r} lacks a full attribute tuple")

    @property
    def node_count(self) -> int:
        return len(self.node_ids)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def adjacency(self) -> dict[str, list[str]]:
        """Neighbor lists with deterministic (sorted) order."""
        adj: dict[str, list[str]] = {n: [] for n in self.node_ids}
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        for neighbors in adj.values():
            neighbors.sort()
        return adj

    def attribute_column(self, name: str) -> list[AttrValue]:
        """Values of one attribute in node order (None where missing)."""
        idx = self.schema.index_of(name)
        return [self.attributes[n][idx] for n in self.node_ids]


@dataclass
class LoadReport:
    """What ingestion dropped while enforcing graph invariants."""

    self_loops_dropped: int = 0
    duplicate_edges_dropped: int = 0


def _parse_value(raw: str, kind: AttributeKind, attr: str, node: str) -> AttrValue:
    text = raw.strip()
    if text.lower() in MISSING_TOKENS:
        return None
    if kind is AttributeKind.NUMERIC:
        try:
            value = float(text)
        except ValueError:
            raise DataError(
                f"unparseable numeric value {raw!r} for attribute {attr!r} of node {node!r}"
            ) from None
        if not math.isfinite(value):
            raise DataError(f"non-finite value for attribute {attr!r} of node {node!r}")
        return value
    return text


def _iter_edge_tokens(lines: Iterable[str]) -> Iterable[tuple[str, str]]:
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.replace(",", " ").split()
        if len(parts) != 2:
            raise DataError(f"edge line {lineno}: expected two IDs, got {stripped!r}")
        yield parts[0], parts[1]


def load_graph(
    edge_source: str | Path | io.TextIOBase,
    node_source: str | Path | io.TextIOBase,
    schema: AttributeSchema,
) -> tuple[LocalGraph, LoadReport]:
    """Load a LocalGraph from an edge list and a node attribute table.

    Edge list: one edge per line, two whitespace- or comma-separated IDs.
    Node table: CSV with a header row of attribute names, first column is
    the node ID. Duplicate edges and self-loops are dropped and counted in
    the returned LoadReport.
    """
    node_text = _read_text(node_source)
    reader = csv.reader(io.StringIO(node_text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("node table is empty") from None
    attr_names = [h.strip() for h in header[1:]]
    if len(attr_names) != schema.attribute_count:
        raise SchemaError(
            f"node table has {len(attr_names)} attribute columns, schema expects "
            f"{schema.attribute_count}"
        )
    if tuple(attr_names) != schema.names:
        raise SchemaError(
            f"node table columns {attr_names} do not match schema {list(schema.names)}"
        )

    attributes: dict[str, tuple[AttrValue, ...]] = {}
    for row in reader:
        if not row or all(not cell.strip() for cell in row):
            continue
        node = row[0].strip()
        if not node:
            raise DataError("node row with empty ID")
        if node in attributes:
            raise DataError(f"duplicate node row for {node!r}")
        if len(row) - 1 != schema.attribute_count:
            raise SchemaError(
                f"node {node!r} has {len(row) - 1} attribute values, expected "
                f"{schema.attribute_count}"
            )
        values = tuple(
            _parse_value(raw, kind, name, node)
            for raw, (name, kind) in zip(row[1:], schema.entries)
        )
        attributes[node] = values

    report = LoadReport()
    edges: set[tuple[str, str]] = set()
    edge_text = _read_text(edge_source)
    for u, v in _iter_edge_tokens(edge_text.splitlines()):
        if u not in attributes or v not in attributes:
            missing = u if u not in attributes else v
            raise DataError(f"edge endpoint {missing!r} absent from node table")
        if u == v:
            report.self_loops_dropped += 1
            continue
        pair = (u, v) if u < v else (v, u)
        if pair in edges:
            report.duplicate_edges_dropped += 1
            continue
        edges.add(pair)

    graph = LocalGraph(
        node_ids=tuple(sorted(attributes)),
        edges=frozenset(edges),
        attributes=attributes,
        schema=schema,
    )
    return graph, report


def _read_text(source: str | Path | io.TextIOBase) -> str:
    if isinstance(source, io.TextIOBase):
        return source.read()
    path = Path(source)
    if path.exists():
        return path.read_text(encoding="utf-8")
    if isinstance(source, str) and ("\n" in source or "," in source):
        # Inline data, not a path.
        return source
    raise DataError(f"source not found: {source!r}")


def build_graph(
    nodes: Sequence[str],
    edges: Iterable[tuple[str, str]],
    attributes: Mapping[str, Sequence[AttrValue]] | None = None,
    schema: AttributeSchema | None = None,
) -> LocalGraph:
    """Construct a LocalGraph directly (tests, synthetic data)."""
    schema = schema or AttributeSchema(())
    attrs: dict[str, tuple[AttrValue, ...]] = {}
    for node in nodes:
        given = attributes.get(node) if attributes else None
        attrs[node] = tuple(given) if given is not None else (None,) * schema.attribute_count
    normalized = set()
    for u, v in edges:
        if u == v:
            continue
        normalized.add((u, v) if u < v else (v, u))
    return LocalGraph(
        node_ids=tuple(sorted(nodes)),
        edges=frozenset(normalized),
        attributes=attrs,
        schema=schema,
    )


# ---------------------------------------------------------------------------
# Topology metrics (all local, all pure functions)
# ---------------------------------------------------------------------------

PAGERANK_DAMPING = 0.85
PAGERANK_TOL = 1e-9
PAGERANK_MAX_ITER = 200
EIGENVECTOR_TOL = 1e-9
EIGENVECTOR_MAX_ITER = 1000


def topology_metric(g: LocalGraph, kind: TopologyMetricKind) -> dict[str, float]:
    """One finite value per node for the requested metric."""
    if g.node_count == 0:
        raise DataError("topology metric on empty graph")
    kind = TopologyMetricKind(kind)
    if kind is TopologyMetricKind.DEGREE:
        return {n: float(len(nbrs)) for n, nbrs in g.adjacency().items()}
    if kind is TopologyMetricKind.BETWEENNESS:
        return _betweenness(g)
    if kind is TopologyMetricKind.EIGENVECTOR:
        return _eigenvector(g)
    if kind is TopologyMetricKind.PAGERANK:
        return _pagerank(g)
    if kind is TopologyMetricKind.CLUSTERING_COEFFICIENT:
        return _clustering_coefficient(g)
    if kind is TopologyMetricKind.KNN_DEGREE:
        return _knn_degree(g)
    raise ValueError(f"unknown metric kind: {kind}")  # pragma: no cover


def _betweenness(g: LocalGraph) -> dict[str, float]:
    """Brandes' algorithm, unnormalized, counting unordered pairs once."""
    adj = g.adjacency()
    centrality = {n: 0.0 for n in g.node_ids}
    for source in g.node_ids:
        stack: list[str] = []
        predecessors: dict[str, list[str]] = {n: [] for n in g.node_ids}
        sigma = {n: 0.0 for n in g.node_ids}
        sigma[source] = 1.0
        dist = {n: -1 for n in g.node_ids}
        dist[source] = 0
        queue = deque([source])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in adj[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    predecessors[w].append(v)
        delta = {n: 0.0 for n in g.node_ids}
        while stack:
            w = stack.pop()
            for v in predecessors[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != source:
                centrality[w] += delta[w]
    # Each unordered pair was accumulated from both endpoints.
    return {n: c / 2.0 for n, c in centrality.items()}


def _pagerank(g: LocalGraph) -> dict[str, float]:
    adj = g.adjacency()
    n = g.node_count
    d = PAGERANK_DAMPING
    rank = {v: 1.0 / n for v in g.node_ids}
    for _ in range(PAGERANK_MAX_ITER):
        dangling_mass = sum(rank[v] for v in g.node_ids if not adj[v])
        new_rank = {}
        base = (1.0 - d) / n + d * dangling_mass / n
        for v in g.node_ids:
            incoming = sum(rank[u] / len(adj[u]) for u in adj[v])
            new_rank[v] = base + d * incoming
        delta = max(abs(new_rank[v] - rank[v]) for v in g.node_ids)
        rank = new_rank
        if delta <= PAGERANK_TOL:
            break
    return rank


def _eigenvector(g: LocalGraph) -> dict[str, float]:
    """Power iteration on A + I (the shift guarantees convergence on
    bipartite graphs without changing eigenvectors), unit L2 norm."""
    adj = g.adjacency()
    if g.edge_count == 0:
        return {n: 0.0 for n in g.node_ids}
    n = g.node_count
    vec = {v: 1.0 / math.sqrt(n) for v in g.node_ids}
    for _ in range(EIGENVECTOR_MAX_ITER):
        nxt = {v: vec[v] + sum(vec[u] for u in adj[v]) for v in g.node_ids}
        norm = math.sqrt(sum(x * x for x in nxt.values()))
        if norm == 0.0:
            return {v: 0.0 for v in g.node_ids}
        nxt = {v: x / norm for v, x in nxt.items()}
        delta = max(abs(nxt[v] - vec[v]) for v in g.node_ids)
        vec = nxt
        if delta <= EIGENVECTOR_TOL:
            break
    return vec


def _clustering_coefficient(g: LocalGraph) -> dict[str, float]:
    adj = {n: set(nbrs) for n, nbrs in g.adjacency().items()}
    result = {}
    for v in g.node_ids:
        neighbors = adj[v]
        k = len(neighbors)
        if k < 2:
            result[v] = 0.0
            continue
        links = 0
        for u in neighbors:
            links += len(adj[u] & neighbors)
        result[v] = links / (k * (k - 1))
    return result


def _knn_degree(g: LocalGraph) -> dict[str, float]:
    adj = g.adjacency()
    degree = {n: len(nbrs) for n, nbrs in adj.items()}
    return {
        v: (sum(degree[u] for u in adj[v]) / degree[v]) if degree[v] else 0.0
        for v in g.node_ids
    }


# ---------------------------------------------------------------------------
# Local attribute statistics
# ---------------------------------------------------------------------------


@dataclass
class AttributeStatsEntry:
    """Per-attribute local statistics; ``empty`` when every value is missing."""

    name: str
    kind: AttributeKind
    empty: bool = False
    minimum: float | None = None
    maximum: float | None = None
    categories: frozenset[str] = frozenset()
    token_doc_counts: Counter = field(default_factory=Counter)


@dataclass
class LocalAttributeStats:
    """Exact per-attribute stats over one party's non-missing values."""

    entries: tuple[AttributeStatsEntry, ...]

    def entry(self, name: str) -> AttributeStatsEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise SchemaError(f"no stats for attribute {name!r}")


#: Vocabulary cap per text attribute when stats are merged across parties.
TEXT_VOCAB_SIZE = 256


@dataclass(frozen=True)
class MergedAttributeEntry:
    """Cross-party statistics for one attribute, as distributed by the server."""

    name: str
    kind: AttributeKind
    empty: bool = False
    minimum: float | None = None
    maximum: float | None = None
    categories: tuple[str, ...] = ()
    vocabulary: tuple[str, ...] = ()

    @property
    def feature_width(self) -> int:
        if self.kind is AttributeKind.NUMERIC:
            return 1
        if self.kind is AttributeKind.CATEGORICAL:
            return len(self.categories)
        return len(self.vocabulary)


@dataclass(frozen=True)
class MergedAttributeStats:
    """Global min/max, category unions, and text vocabularies for a run."""

    entries: tuple[MergedAttributeEntry, ...]

    def entry(self, name: str) -> MergedAttributeEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise SchemaError(f"no merged stats for attribute {name!r}")

    @property
    def feature_length(self) -> int:
        return sum(e.feature_width for e in self.entries)


def merge_attribute_stats(
    schema: AttributeSchema,
    per_client: Sequence[LocalAttributeStats],
    vocab_size: int = TEXT_VOCAB_SIZE,
) -> MergedAttributeStats:
    """Merge per-party stats: global min/max, union of category sets, and the
    top ``vocab_size`` text tokens by pooled document frequency."""
    merged = []
    for name, kind in schema.entries:
        locals_ = [stats.entry(name) for stats in per_client]
        present = [e for e in locals_ if not e.empty]
        if not present:
            merged.append(MergedAttributeEntry(name=name, kind=kind, empty=True))
            continue
        if kind is AttributeKind.NUMERIC:
            merged.append(
                MergedAttributeEntry(
                    name=name,
                    kind=kind,
                    minimum=min(e.minimum for e in present),
                    maximum=max(e.maximum for e in present),
                )
            )
        elif kind is AttributeKind.CATEGORICAL:
            categories: set[str] = set()
            for e in present:
                categories |= e.categories
            merged.append(
                MergedAttributeEntry(name=name, kind=kind, categories=tuple(sorted(categories)))
            )
        else:
            pooled: Counter = Counter()
            for e in present:
                pooled.update(e.token_doc_counts)
            ranked = sorted(pooled.items(), key=lambda kv: (-kv[1], kv[0]))[:vocab_size]
            merged.append(
                MergedAttributeEntry(
                    name=name, kind=kind, vocabulary=tuple(tok for tok, _ in ranked)
                )
            )
    return MergedAttributeStats(entries=tuple(merged))


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation splits tokens."""
    out: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            out.append("".join(current))
            current = []
    if current:
        out.append("".join(current))
    return out


def local_attribute_stats(g: LocalGraph, schema: AttributeSchema) -> LocalAttributeStats:
    """Min/max per numeric attribute, value sets per categorical attribute,
    token document counts per text attribute. Missing values are excluded;
    an attribute with no observed values is flagged ``empty``."""
    if schema != g.schema:
        raise SchemaError("graph does not conform to the given schema")
    entries = []
    for idx, (name, kind) in enumerate(schema.entries):
        observed = [g.attributes[n][idx] for n in g.node_ids]
        present = [v for v in observed if v is not None]
        if not present:
            entries.append(AttributeStatsEntry(name=name, kind=kind, empty=True))
            continue
        if kind is AttributeKind.NUMERIC:
            values = [float(v) for v in present]
            entries.append(
                AttributeStatsEntry(
                    name=name, kind=kind, minimum=min(values), maximum=max(values)
                )
            )
        elif kind is AttributeKind.CATEGORICAL:
            entries.append(
                AttributeStatsEntry(
                    name=name, kind=kind, categories=frozenset(str(v) for v in present)
                )
            )
        else:
            counts: Counter = Counter()
            for value in present:
                counts.update(set(tokenize(str(value))))
            entries.append(AttributeStatsEntry(name=name, kind=kind, token_doc_counts=counts))
    return LocalAttributeStats(entries=tuple(entries))
