"""Assembly of the federated representation: protected attribute histograms,
filterable local binning, and structure reconstruction from embeddings."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import CheckpointData, write_checkpoint
from .errors import ConfigError, DataError, SchemaError
from .graph import (
    AttributeKind,
    LocalGraph,
    MergedAttributeStats,
    TopologyMetricKind,
    topology_metric,
)

_METRIC_NAMES = {m.value for m in TopologyMetricKind}


@dataclass(frozen=True)
class FilterCondition:
    """Conjunction of per-attribute predicates (inclusive numeric ranges and
    category membership). An empty condition passes every node; a missing
    value fails any predicate on its attribute."""

    numeric_ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    category_members: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def validate(self, schema) -> None:
        for name in list(self.numeric_ranges) + list(self.category_members):
            if name not in schema.names:
                raise SchemaError(f"filter references unknown attribute {name!r}")

    def is_empty(self) -> bool:
        return not self.numeric_ranges and not self.category_members

    def passes(self, g: LocalGraph, node: str) -> bool:
        values = g.attributes[node]
        for name, (lo, hi) in self.numeric_ranges.items():
            v = values[g.schema.index_of(name)]
            if v is None or not (lo <= float(v) <= hi):
                return False
        for name, members in self.category_members.items():
            v = values[g.schema.index_of(name)]
            if v is None or str(v) not in members:
                return False
        return True

    def mask(self, g: LocalGraph) -> np.ndarray:
        if self.is_empty():
            return np.ones(g.node_count, dtype=bool)
        self.validate(g.schema)
        return np.array([self.passes(g, n) for n in g.node_ids], dtype=bool)

    def to_dict(self) -> dict:
        return {
            "numeric_ranges": {k: list(v) for k, v in self.numeric_ranges.items()},
            "category_members": {k: list(v) for k, v in self.category_members.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "FilterCondition":
        if not data:
            return cls()
        return cls(
            numeric_ranges={
                k: (float(v[0]), float(v[1]))
                for k, v in (data.get("numeric_ranges") or {}).items()
            },
            category_members={
                k: tuple(str(x) for x in v)
                for k, v in (data.get("category_members") or {}).items()
            },
        )


@dataclass(frozen=True)
class HistogramSpec:
    """What to count: a schema attribute or a topology metric, and how many
    numeric bins to use (ignored for categorical targets)."""

    target: str
    bin_count: int = 10

    def __post_init__(self) -> None:
        if self.bin_count < 1:
            raise ConfigError("bin_count must be >= 1")

    @property
    def is_metric(self) -> bool:
        return self.target in _METRIC_NAMES


@dataclass
class AttributeHistogram:
    """One released distribution: bin labels or edges plus protected counts."""

    target: str
    kind: str  # "numeric" | "categorical" | "metric"
    counts: np.ndarray
    bin_edges: tuple[float, ...] = ()
    categories: tuple[str, ...] = ()
    filter_descriptor: dict = field(default_factory=dict)
    mechanism: str = "none"
    suppressed_mass: float = 0.0

    @property
    def bin_count(self) -> int:
        return len(self.counts)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "kind": self.kind,
            "counts": [float(c) for c in self.counts],
            "bin_edges": list(self.bin_edges),
            "categories": list(self.categories),
            "filter": self.filter_descriptor,
            "mechanism": self.mechanism,
            "suppressed_mass": self.suppressed_mass,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeHistogram":
        return cls(
            target=data["target"],
            kind=data["kind"],
            counts=np.asarray(data["counts"], dtype=np.float64),
            bin_edges=tuple(float(e) for e in data.get("bin_edges", ())),
            categories=tuple(data.get("categories", ())),
            filter_descriptor=dict(data.get("filter", {})),
            mechanism=data.get("mechanism", "none"),
            suppressed_mass=float(data.get("suppressed_mass", 0.0)),
        )


def numeric_bin_edges(minimum: float, maximum: float, bin_count: int) -> tuple[float, ...]:
    """Equal-width edges spanning the merged global range; a degenerate range
    widens to unit width so the edges stay strictly increasing."""
    if bin_count < 1:
        raise ConfigError("bin_count must be >= 1")
    if maximum <= minimum:
        maximum = minimum + 1.0
    return tuple(np.linspace(minimum, maximum, bin_count + 1).tolist())


def assign_bins(
    g: LocalGraph,
    spec: HistogramSpec,
    stats: MergedAttributeStats,
    filt: FilterCondition | None = None,
    bin_edges: Sequence[float] | None = None,
    metric_values: Mapping[str, float] | None = None,
) -> tuple[np.ndarray, AttributeHistogram]:
    """Per-node bin assignment (-1 = filtered out or missing) plus the empty
    histogram shell describing the binning.

    Numeric bins are left-closed/right-open with the final bin right-closed;
    out-of-range values (stale stats) clamp into the end bins.
    """
    filt = filt or FilterCondition()
    keep = filt.mask(g)
    assignment = np.full(g.node_count, -1, dtype=np.int64)

    if spec.is_metric:
        values = metric_values or topology_metric(g, TopologyMetricKind(spec.target))
        raw = np.array([values[n] for n in g.node_ids], dtype=np.float64)
        if bin_edges is None:
            bin_edges = numeric_bin_edges(float(raw.min()), float(raw.max()), spec.bin_count)
        shell = AttributeHistogram(
            target=spec.target,
            kind="metric",
            counts=np.zeros(len(bin_edges) - 1),
            bin_edges=tuple(bin_edges),
            filter_descriptor=filt.to_dict(),
        )
        assignment[keep] = _bin_numeric(raw[keep], np.asarray(bin_edges))
        return assignment, shell

    kind = g.schema.kind_of(spec.target)
    if kind is AttributeKind.TEXT:
        raise ConfigError(f"text attribute {spec.target!r} is not countable")
    entry = stats.entry(spec.target)
    column = g.attribute_column(spec.target)

    if kind is AttributeKind.NUMERIC:
        if bin_edges is None:
            lo = entry.minimum if entry.minimum is not None else 0.0
            hi = entry.maximum if entry.maximum is not None else 1.0
            bin_edges = numeric_bin_edges(lo, hi, spec.bin_count)
        shell = AttributeHistogram(
            target=spec.target,
            kind="numeric",
            counts=np.zeros(len(bin_edges) - 1),
            bin_edges=tuple(bin_edges),
            filter_descriptor=filt.to_dict(),
        )
        edges = np.asarray(bin_edges)
        for i, value in enumerate(column):
            if keep[i] and value is not None:
                assignment[i] = _bin_numeric(np.array([float(value)]), edges)[0]
        return assignment, shell

    categories = entry.categories
    shell = AttributeHistogram(
        target=spec.target,
        kind="categorical",
        counts=np.zeros(len(categories)),
        categories=categories,
        filter_descriptor=filt.to_dict(),
    )
    lookup = {c: i for i, c in enumerate(categories)}
    for i, value in enumerate(column):
        if keep[i] and value is not None:
            assignment[i] = lookup.get(str(value), -1)
    return assignment, shell


def _bin_numeric(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(edges, values, side="right") - 1
    # Final bin is right-closed; clamp strays from stale stats into end bins.
    idx[values >= edges[-1]] = len(edges) - 2
    idx[values < edges[0]] = 0
    return idx


def build_histogram(
    g: LocalGraph,
    spec: HistogramSpec,
    stats: MergedAttributeStats,
    filt: FilterCondition | None = None,
    bin_edges: Sequence[float] | None = None,
) -> tuple[np.ndarray, AttributeHistogram]:
    """Integer counts over filter-passing nodes with non-missing values."""
    assignment, shell = assign_bins(g, spec, stats, filt, bin_edges)
    counts = np.bincount(assignment[assignment >= 0], minlength=shell.bin_count)
    return counts.astype(np.int64), shell


# ---------------------------------------------------------------------------
# Structure reconstruction
# ---------------------------------------------------------------------------


def reconstruct_structure(
    embeddings: np.ndarray,
    target_edges: int,
    metric: str = "euclidean",
    jitter: float = 0.0,
    jitter_rng: np.random.Generator | None = None,
) -> list[tuple[int, int]]:
    """The ``target_edges`` nearest unordered row pairs.

    Pairs stream through a bounded max-heap of size ``target_edges``
    (O(N^2 log E)); ties break lexicographically on the row-index pair, so
    the result equals the full-sort oracle regardless of streaming order.
    """
    n, d = embeddings.shape
    if d < 1:
        raise DataError("embeddings must have at least one dimension")
    max_pairs = n * (n - 1) // 2
    if target_edges > max_pairs:
        raise DataError(f"target_edges {target_edges} exceeds pair count {max_pairs}")
    if target_edges == 0:
        return []
    if metric not in ("euclidean", "cosine"):
        raise ConfigError(f"unknown metric {metric!r}")

    x = np.asarray(embeddings, dtype=np.float64)
    if metric == "cosine":
        norms = np.linalg.norm(x, axis=1)
        safe = np.where(norms == 0.0, 1.0, norms)
        unit = x / safe[:, None]
        unit[norms == 0.0] = 0.0

    heap: list[tuple[float, int, int]] = []  # (-distance, -i, -j)
    for i in range(n - 1):
        if metric == "euclidean":
            diff = x[i + 1 :] - x[i]
            dists = np.sqrt(np.einsum("nd,nd->n", diff, diff))
        else:
            dists = 1.0 - unit[i + 1 :] @ unit[i]
        if jitter > 0.0:
            if jitter_rng is None:
                raise ConfigError("jitter requires a generator")
            dists = dists + jitter_rng.uniform(-jitter, jitter, size=len(dists))
        if len(heap) == target_edges:
            worst_d = -heap[0][0]
            candidates = np.flatnonzero(dists <= worst_d)
        else:
            candidates = np.arange(len(dists))
        for offset in candidates:
            j = i + 1 + int(offset)
            item = (-float(dists[offset]), -i, -j)
            if len(heap) < target_edges:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
    return sorted((-i, -j) for _, i, j in heap)


def reconstruction_target(client_edge_counts: Sequence[int]) -> int:
    """Default reconstruction size: mean of the clients' edge counts."""
    if not client_edge_counts:
        raise DataError("no client edge counts")
    return int(round(sum(client_edge_counts) / len(client_edge_counts)))


# ---------------------------------------------------------------------------
# The assembled representation
# ---------------------------------------------------------------------------


@dataclass
class FederatedRepresentation:
    """R = (embedding matrix, protected histograms, reconstructed edges)."""

    w_emb: np.ndarray
    w_att: list[AttributeHistogram]
    w_struc: list[tuple[int, int]]
    round_no: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.isfinite(self.w_emb).all():
            raise DataError("embedding matrix has non-finite entries")
        seen = set()
        for i, j in self.w_struc:
            if i == j:
                raise DataError("self-loop in reconstructed structure")
            if (i, j) in seen:
                raise DataError("duplicate edge in reconstructed structure")
            seen.add((i, j))


def assemble(
    basic: np.ndarray,
    reduced: np.ndarray,
    histograms: list[AttributeHistogram],
    struc_table: np.ndarray,
    target_edges: int,
    metric: str = "euclidean",
    jitter: float = 0.0,
    jitter_rng: np.random.Generator | None = None,
    max_edges: int | None = None,
    round_no: int = 0,
    metadata: dict | None = None,
) -> FederatedRepresentation:
    """Compose W_emb = [basic | reduced], reconstruct W_struc from the
    structure table, and carry the aggregated histograms as W_att."""
    from .embedding import compose_embedding

    if max_edges is not None:
        target_edges = min(target_edges, max_edges)
    target_edges = min(target_edges, struc_table.shape[0] * (struc_table.shape[0] - 1) // 2)
    edges = reconstruct_structure(struc_table, target_edges, metric, jitter, jitter_rng)
    return FederatedRepresentation(
        w_emb=compose_embedding(basic, reduced),
        w_att=histograms,
        w_struc=edges,
        round_no=round_no,
        metadata=dict(metadata or {}),
    )


def export_representation(rep: FederatedRepresentation, directory: str | Path) -> None:
    """Write the representation: embedding matrix in the checkpoint container,
    edge list as text, histograms as a JSON document."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config_hash = bytes.fromhex(rep.metadata.get("config_hash", "00" * 32))
    write_checkpoint(
        directory / "embedding.bin",
        CheckpointData(round_no=rep.round_no, config_hash=config_hash, tables=[rep.w_emb]),
    )
    with open(directory / "edges.txt", "w", encoding="utf-8") as fh:
        for i, j in rep.w_struc:
            fh.write(f"{i} {j}\n")
    doc = {
        "round": rep.round_no,
        "metadata": rep.metadata,
        "histograms": [h.to_dict() for h in rep.w_att],
    }
    with open(directory / "histograms.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_representation(directory: str | Path) -> FederatedRepresentation:
    from .checkpoint import read_checkpoint

    directory = Path(directory)
    ckpt = read_checkpoint(directory / "embedding.bin")
    edges = []
    edge_text = (directory / "edges.txt").read_text(encoding="utf-8")
    for line in edge_text.splitlines():
        if line.strip():
            a, b = line.split()
            edges.append((int(a), int(b)))
    doc = json.loads((directory / "histograms.json").read_text(encoding="utf-8"))
    return FederatedRepresentation(
        w_emb=ckpt.tables[0],
        w_att=[AttributeHistogram.from_dict(h) for h in doc["histograms"]],
        w_struc=edges,
        round_no=doc["round"],
        metadata=doc.get("metadata", {}),
    )
