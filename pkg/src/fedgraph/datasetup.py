"""Turn the `data` section of a run document into client graphs."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .federation import ClientNode
from .graph import AttributeKind, AttributeSchema, load_graph
from .synth import sbm_graph, shard_graph


def schema_from_doc(entries: list[dict]) -> AttributeSchema:
    return AttributeSchema(
        tuple((e["name"], AttributeKind(e["kind"])) for e in entries)
    )


def build_client_nodes(data_doc: dict, base_dir: str | Path | None = None) -> list[ClientNode]:
    """Clients from either a synthetic spec or per-client file sources.

    Synthetic: ``{"synthetic": {"blocks": [...], "p_in": .., "p_out": ..,
    "seed": .., "clients": K, "shared_fraction": ..}}``.
    Files: ``{"schema": [{name, kind}...], "clients": [{"id", "edges",
    "nodes"}...]}`` with paths relative to ``base_dir``.
    """
    if "synthetic" in data_doc:
        spec = data_doc["synthetic"]
        graph, _ = sbm_graph(
            block_sizes=tuple(spec.get("blocks", (100, 100))),
            p_in=float(spec.get("p_in", 0.05)),
            p_out=float(spec.get("p_out", 0.005)),
            seed=int(spec.get("seed", 0)),
        )
        shards = shard_graph(
            graph,
            clients=int(spec.get("clients", 1)),
            shared_fraction=float(spec.get("shared_fraction", 0.1)),
            seed=int(spec.get("seed", 0)),
        )
        return [ClientNode(f"client-{i}", shard) for i, shard in enumerate(shards)]

    if "clients" in data_doc:
        if "schema" not in data_doc:
            raise ConfigError("file-backed clients need a schema declaration")
        schema = schema_from_doc(data_doc["schema"])
        base = Path(base_dir) if base_dir is not None else Path(".")
        nodes = []
        for i, entry in enumerate(data_doc["clients"]):
            graph, _ = load_graph(
                base / entry["edges"], base / entry["nodes"], schema
            )
            nodes.append(ClientNode(entry.get("id", f"client-{i}"), graph))
        return nodes

    raise ConfigError("data section needs either 'synthetic' or 'clients'")


def load_run_document(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "run" not in doc:
        raise ConfigError("run document needs a 'run' section")
    return doc
