"""Command-line surface: headless runs, evaluation, serving, and clients."""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from .analysis import EvaluationReport, eval_classification, eval_link_auc, eval_precision_at_l
from .datasetup import build_client_nodes, load_run_document, schema_from_doc
from .errors import FedgraphError
from .federation import ClientNode, Coordinator, InProcessEndpoint, RunConfig, run_client_over_tcp
from .graph import load_graph
from .representation import export_representation, load_representation


@click.group()
def main() -> None:
    """Federated graph representations: run, evaluate, serve."""


@main.command("run")
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", "output_dir", required=True, type=click.Path(file_okay=False))
@click.option("--checkpoint", type=int, default=None, help="Assemble from this round instead of the final one.")
@click.option("--run-dir", type=click.Path(file_okay=False), default=None, help="Also persist full run artifacts here.")
def run_command(config_file: str, output_dir: str, checkpoint: int | None, run_dir: str | None) -> None:
    """Execute a full in-process federation run and export the representation."""
    try:
        document = load_run_document(config_file)
        config = RunConfig.from_dict(document["run"])
        nodes = build_client_nodes(document.get("data", {}), Path(config_file).parent)
        coordinator = Coordinator(config, run_id="cli", workdir=run_dir)
        result = coordinator.execute([InProcessEndpoint(n) for n in nodes])
        representation = result.representation_at(checkpoint)
        export_representation(representation, output_dir)
        with open(Path(output_dir) / "config.json", "w", encoding="utf-8") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(Path(output_dir) / "index.json", "w", encoding="utf-8") as fh:
            json.dump(dict(result.global_index.id_to_row), fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo(
            json.dumps(
                {
                    "status": result.status,
                    "rounds": result.final_round,
                    "checkpoint": representation.round_no,
                    "nodes": int(representation.w_emb.shape[0]),
                    "edges": len(representation.w_struc),
                    "export": str(output_dir),
                },
                sort_keys=True,
            )
        )
    except FedgraphError as exc:
        raise click.ClickException(str(exc)) from exc


@main.command("eval")
@click.argument("representation_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--labels", "labels_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="CSV of node_id,label for the classification probe.")
@click.option("--held-out-edges", "edges_file", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Edge list (node IDs) of held-out true edges for AUC / precision.")
@click.option("--precision-l", type=int, default=1000, show_default=True)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def eval_command(representation_dir, labels_file, edges_file, precision_l, folds, seed) -> None:
    """Score an exported representation; prints an evaluation report as JSON."""
    try:
        rep = load_representation(representation_dir)
        index_path = Path(representation_dir) / "index.json"
        index = json.loads(index_path.read_text()) if index_path.exists() else None
        report = EvaluationReport(config={"folds": folds, "precision_l": precision_l, "seed": seed})

        if labels_file:
            if index is None:
                raise click.ClickException("labels need index.json in the export")
            rows, labels = [], []
            with open(labels_file, newline="", encoding="utf-8") as fh:
                for record in csv.reader(fh):
                    if not record or record[0] == "node_id":
                        continue
                    node, label = record[0].strip(), record[1].strip()
                    if node in index:
                        rows.append(index[node])
                        labels.append(label)
            mean, std = eval_classification(rep.w_emb[rows], labels, folds=folds, seed=seed)
            report.accuracy_mean = mean
            report.accuracy_std = std

        if edges_file:
            if index is None:
                raise click.ClickException("edges need index.json in the export")
            held = []
            for line in Path(edges_file).read_text(encoding="utf-8").splitlines():
                parts = line.replace(",", " ").split()
                if len(parts) == 2 and parts[0] in index and parts[1] in index:
                    held.append((index[parts[0]], index[parts[1]]))
            report.link_auc = eval_link_auc(rep.w_emb, held, seed=seed)
            report.precision_at_l = eval_precision_at_l(
                rep.w_emb, held, min(precision_l, len(held) * 50)
            )

        click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    except FedgraphError as exc:
        raise click.ClickException(str(exc)) from exc


@main.command("serve")
@click.option("--bind", default=None, help="host:port (defaults to $FEDGRAPH_BIND or 127.0.0.1:8000)")
@click.option("--root", type=click.Path(file_okay=False), default=None, help="Persist run artifacts under this directory.")
def serve_command(bind: str | None, root: str | None) -> None:
    """Start the workbench API; runs spawn simulated clients in-process."""
    from .service import main_serve

    main_serve(bind=bind, root=root)


@main.command("client")
@click.option("--coordinator", required=True, help="host:port of a listening coordinator")
@click.option("--client-id", required=True)
@click.option("--edges", "edges_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--nodes", "nodes_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--schema", "schema_file", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON list of {name, kind} attribute declarations.")
def client_command(coordinator, client_id, edges_file, nodes_file, schema_file) -> None:
    """Connect one party's graph to a coordinator over TCP."""
    try:
        schema = schema_from_doc(json.loads(Path(schema_file).read_text()))
        graph, report = load_graph(edges_file, nodes_file, schema)
        if report.self_loops_dropped or report.duplicate_edges_dropped:
            click.echo(
                f"dropped {report.self_loops_dropped} self-loops, "
                f"{report.duplicate_edges_dropped} duplicate edges",
                err=True,
            )
        host, _, port = coordinator.rpartition(":")
        node = ClientNode(client_id, graph)
        run_client_over_tcp(host or "127.0.0.1", int(port), node)
        click.echo(json.dumps({"client_id": client_id, "status": "done"}))
    except FedgraphError as exc:
        raise click.ClickException(str(exc)) from exc


if __name__ == "__main__":
    main(sys.argv[1:])
