"""Synthetic graphs for demos and verification: stochastic block models with
attribute tables, plus shard splitting that mimics multi-party ownership."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .graph import AttributeKind, AttributeSchema, LocalGraph
from .rng import make_rng

SYNTH_SCHEMA = AttributeSchema.of(
    ("score", AttributeKind.NUMERIC),
    ("group", AttributeKind.CATEGORICAL),
)

_WORDS = (
    "trade guild quest raid arena mount potion forge scroll rune",
    "cite survey method theory proof corpus model metric graph node",
)


def sbm_graph(
    block_sizes: tuple[int, ...] = (200, 200),
    p_in: float = 0.05,
    p_out: float = 0.002,
    seed: int = 0,
    id_prefix: str = "v",
) -> tuple[LocalGraph, dict[str, int]]:
    """Stochastic block model with block-correlated attributes.

    Returns the graph and the ground-truth block label per node. Node IDs are
    zero-padded so that sorted ID order equals generation order.
    """
    rng = make_rng(seed, "sbm")
    n = sum(block_sizes)
    width = max(4, len(str(n)))
    blocks: list[int] = []
    for b, size in enumerate(block_sizes):
        blocks.extend([b] * size)
    node_ids = [f"{id_prefix}{i:0{width}d}" for i in range(n)]

    edges = set()
    block_arr = np.array(blocks)
    for i in range(n):
        probs = np.where(block_arr[i + 1 :] == blocks[i], p_in, p_out)
        hits = np.flatnonzero(rng.random(n - i - 1) < probs)
        for h in hits:
            edges.add((node_ids[i], node_ids[i + 1 + h]))

    attributes = {}
    for i, node in enumerate(node_ids):
        score = float(rng.normal(loc=blocks[i] * 2.0, scale=0.6))
        group = f"g{blocks[i]}" if rng.random() > 0.1 else f"g{1 - blocks[i] if len(block_sizes) == 2 else 0}"
        attributes[node] = (score, group)

    graph = LocalGraph(
        node_ids=tuple(node_ids),
        edges=frozenset(edges),
        attributes=attributes,
        schema=SYNTH_SCHEMA,
    )
    return graph, {node_ids[i]: blocks[i] for i in range(n)}


def shard_graph(
    graph: LocalGraph, clients: int, shared_fraction: float = 0.1, seed: int = 0
) -> list[LocalGraph]:
    """Split one graph into per-party shards.

    Every node lands in exactly one shard; a ``shared_fraction`` of nodes is
    additionally present on every party (same entity, same public ID). Each
    party keeps only the edges whose two endpoints it holds.
    """
    if clients < 1:
        raise ConfigError("clients must be >= 1")
    rng = make_rng(seed, "shard")
    nodes = list(graph.node_ids)
    order = rng.permutation(len(nodes))
    shared_count = int(round(shared_fraction * len(nodes)))
    shared = {nodes[i] for i in order[:shared_count]}
    owner: dict[str, int] = {}
    for pos, i in enumerate(order[shared_count:]):
        owner[nodes[i]] = pos % clients

    shards = []
    for c in range(clients):
        members = {n for n, o in owner.items() if o == c} | shared
        edges = {(u, v) for u, v in graph.edges if u in members and v in members}
        attributes = {n: graph.attributes[n] for n in members}
        shards.append(
            LocalGraph(
                node_ids=tuple(sorted(members)),
                edges=frozenset(edges),
                attributes=attributes,
                schema=graph.schema,
            )
        )
    return shards


def graph_to_sources(graph: LocalGraph) -> tuple[str, str]:
    """Render a graph as (edge list text, node table CSV) for the loaders."""
    edge_lines = [f"{u} {v}" for u, v in sorted(graph.edges)]
    header = ["id"] + list(graph.schema.names)
    rows = [",".join(header)]
    for node in graph.node_ids:
        values = []
        for v in graph.attributes[node]:
            values.append("" if v is None else str(v))
        rows.append(",".join([node] + values))
    return "\n".join(edge_lines) + "\n", "\n".join(rows) + "\n"
