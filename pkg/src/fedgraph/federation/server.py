"""Coordinator: initialization, round aggregation, and run orchestration.

The coordinator never sees raw graphs. It learns public node IDs, aggregate
attribute statistics, sparse weight deltas, and masked histograms - exactly
what the wire schema admits.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from ..checkpoint import CheckpointData, read_checkpoint, write_checkpoint
from ..embedding import init_model_state, EmbeddingModelState
from ..errors import ConfigError, DataError, TransportError
from ..graph import merge_attribute_stats
from ..privacy import Mechanism, unmask_sum, make_mask_seeds
from ..representation import (
    AttributeHistogram,
    FederatedRepresentation,
    assemble,
    numeric_bin_edges,
    reconstruction_target,
)
from ..rng import derive_seed, make_rng
from .client import deserialize_stats, serialize_merged
from .config import RunConfig
from .index import GlobalIndex
from .messages import decode_matrix, decode_uint64, encode_matrix, validate_message

logger = logging.getLogger(__name__)

_DP_MECHANISMS = (Mechanism.LAPLACE, Mechanism.EXPONENTIAL)


class ClientEndpoint(Protocol):
    """One connected client, seen from the coordinator."""

    client_id: str

    def fetch_register(self, run_id: str) -> dict: ...

    def send_bundle(self, bundle: dict) -> list[dict]: ...

    def exchange(self, message: dict) -> list[dict]: ...

    def close(self) -> None: ...


class AbortRun(Exception):
    pass


@dataclass
class RoundMetrics:
    round_no: int
    client_id: str
    loss: float
    duration_s: float
    phase: str = "emb"
    probe_accuracy: float | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round_no,
            "client_id": self.client_id,
            "loss": self.loss,
            "duration_s": self.duration_s,
            "phase": self.phase,
            "probe_accuracy": self.probe_accuracy,
        }


class RunControl:
    """Operator commands: checked by the coordinator at round boundaries."""

    def __init__(self) -> None:
        self._commands: deque[str] = deque()
        self._cv = threading.Condition()

    def post(self, action: str) -> None:
        if action not in ("pause", "resume", "early_stop", "abort"):
            raise ConfigError(f"unknown control action {action!r}")
        with self._cv:
            self._commands.append(action)
            self._cv.notify_all()

    def poll(self) -> str | None:
        with self._cv:
            return self._commands.popleft() if self._commands else None

    def wait(self) -> str:
        with self._cv:
            while not self._commands:
                self._cv.wait()
            return self._commands.popleft()


@dataclass
class ClientInfo:
    client_id: str
    node_count: int
    edge_count: int

    def to_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "node_count": self.node_count,
            "edge_count": self.edge_count,
        }


@dataclass
class RunResult:
    config: RunConfig
    run_id: str
    global_index: GlobalIndex | None
    client_infos: list[ClientInfo]
    metrics: list[RoundMetrics]
    checkpoints: dict[int, CheckpointData]
    struc_final: CheckpointData | None
    histograms: list[AttributeHistogram]
    bin_members: dict[str, list[list[int]]] | None
    features: np.ndarray
    transcript: list[dict] = field(default_factory=list)
    status: str = "finished"
    final_round: int = 0

    def checkpoint_rounds(self) -> list[int]:
        return sorted(self.checkpoints)

    def checkpoint_at_or_before(self, round_no: int) -> int:
        eligible = [r for r in self.checkpoints if r <= round_no]
        if not eligible:
            raise DataError(f"no checkpoint at or before round {round_no}")
        return max(eligible)

    def representation_at(self, round_no: int | None = None) -> FederatedRepresentation:
        """Assemble R from the checkpoint at (or latest before) ``round_no``."""
        if round_no is None:
            round_no = self.final_round
        chosen = self.checkpoint_at_or_before(round_no)
        ckpt = self.checkpoints[chosen]
        basic = ckpt.tables[0]
        struc_table = self.struc_final.tables[0] if self.struc_final is not None else basic
        cfg = self.config
        target = cfg.target_edges
        if target is None:
            target = reconstruction_target([c.edge_count for c in self.client_infos])
        jitter_rng = (
            make_rng(cfg.run_seed, "struc-jitter") if cfg.struc_jitter > 0 else None
        )
        releases = len(self.histograms) if cfg.privacy.mechanism in _DP_MECHANISMS else 0
        return assemble(
            basic=basic,
            reduced=self.features,
            histograms=self.histograms,
            struc_table=struc_table,
            target_edges=target,
            metric=cfg.struc_metric,
            jitter=cfg.struc_jitter,
            jitter_rng=jitter_rng,
            max_edges=cfg.max_edges,
            round_no=chosen,
            metadata={
                "config_hash": cfg.config_hash().hex(),
                "mechanism": cfg.privacy.mechanism.value,
                "cumulative_epsilon": cfg.privacy.epsilon * releases,
                "target_edges": target,
            },
        )


class Coordinator:
    """Drives a full run against a set of client endpoints."""

    def __init__(
        self,
        config: RunConfig,
        run_id: str = "run",
        workdir: str | Path | None = None,
        record_transcript: bool = True,
    ) -> None:
        self.config = config
        self.run_id = run_id
        self.workdir = Path(workdir) if workdir is not None else None
        self.record_transcript = record_transcript
        self.transcript: list[dict] = []
        self._bin_edges: dict[str, list[float]] = {}

    # -- transcript ---------------------------------------------------------

    def _record(self, direction: str, message: dict) -> None:
        if self.record_transcript:
            validate_message(message)
            self.transcript.append({"direction": direction, "message": message})

    def _send_bundle(self, endpoint: ClientEndpoint, bundle: dict) -> list[dict]:
        self._record("s2c", bundle)
        replies = endpoint.send_bundle(bundle)
        for reply in replies:
            self._record("c2s", reply)
        return replies

    def _exchange(self, endpoint: ClientEndpoint, message: dict) -> list[dict]:
        self._record("s2c", message)
        replies = endpoint.exchange(message)
        for reply in replies:
            self._record("c2s", reply)
        return replies

    # -- run ----------------------------------------------------------------

    def execute(
        self,
        endpoints: Sequence[ClientEndpoint],
        control: RunControl | None = None,
        on_metrics: Callable[[RoundMetrics], None] | None = None,
        on_status: Callable[[str], None] | None = None,
        on_state: Callable[[int, EmbeddingModelState], None] | None = None,
    ) -> RunResult:
        cfg = self.config
        status = lambda s: on_status(s) if on_status else None

        registrations = self._register(endpoints)
        index, merged, bundles = self._initialize(registrations)
        by_id = {ep.client_id: ep for ep in endpoints}
        ordered = [by_id[cid] for cid in sorted(by_id)]
        for endpoint in ordered:
            self._send_bundle(endpoint, bundles[endpoint.client_id])

        checkpoints: dict[int, CheckpointData] = {}
        metrics: list[RoundMetrics] = []

        def metrics_sink(records: list[RoundMetrics]) -> None:
            for record in records:
                metrics.append(record)
                if on_metrics:
                    on_metrics(record)

        state = init_model_state(index.n_rows, cfg.skipgram.dimension, derive_seed(cfg.run_seed, "emb"))
        checkpoints[0] = self._freeze(state, 0)
        final_round = self._train_phase(
            "emb", state, cfg.skipgram, ordered, cfg.rounds, control,
            metrics_sink, status, checkpoints, on_state,
        )
        if final_round not in checkpoints:
            checkpoints[final_round] = self._freeze(state, final_round)

        struc_final: CheckpointData | None = None
        if cfg.trains_structure_separately:
            struc_state = init_model_state(
                index.n_rows, cfg.struc_skipgram.dimension, derive_seed(cfg.run_seed, "struc")
            )
            struc_round = self._train_phase(
                "struc", struc_state, cfg.struc_skipgram, ordered, cfg.rounds,
                control, metrics_sink, status, None, None,
            )
            struc_final = self._freeze(struc_state, struc_round)

        histograms, bin_members, features = self._attribute_phase(
            state, ordered, merged, index, final_round
        )

        result = RunResult(
            config=cfg,
            run_id=self.run_id,
            global_index=index,
            client_infos=[
                ClientInfo(r["client_id"], r["node_count"], r["edge_count"])
                for r in sorted(registrations, key=lambda r: r["client_id"])
            ],
            metrics=metrics,
            checkpoints=checkpoints,
            struc_final=struc_final,
            histograms=histograms,
            bin_members=bin_members,
            features=features,
            transcript=self.transcript,
            status="finished",
            final_round=final_round,
        )
        if self.workdir is not None:
            save_result(result, self.workdir)
        status("finished")
        return result

    # -- registration and initialization -------------------------------------

    def _register(self, endpoints: Sequence[ClientEndpoint]) -> list[dict]:
        if not endpoints:
            raise ConfigError("no clients connected")
        registrations = []
        seen: set[str] = set()
        for endpoint in endpoints:
            message = endpoint.fetch_register(self.run_id)
            self._record("c2s", message)
            cid = message["client_id"]
            if cid in seen:
                raise ConfigError(f"duplicate client registration: {cid!r}")
            seen.add(cid)
            registrations.append(message)
        schemas = {
            tuple((e["name"], e["kind"]) for e in r["attr_stats"]) for r in registrations
        }
        if len(schemas) > 1:
            raise ConfigError("clients registered with differing attribute schemas")
        return registrations

    def _initialize(self, registrations: list[dict]):
        cfg = self.config
        registrations = sorted(registrations, key=lambda r: r["client_id"])
        index = GlobalIndex.build([r["node_ids"] for r in registrations])
        stats_list = [deserialize_stats(r["attr_stats"]) for r in registrations]
        # Any client's schema works here; equality was checked at registration.
        schema = _schema_from_stats(registrations[0]["attr_stats"])
        merged = merge_attribute_stats(schema, stats_list)
        client_ids = [r["client_id"] for r in registrations]
        mask_seeds = make_mask_seeds(client_ids, cfg.run_seed)
        projection_seed = derive_seed(cfg.run_seed, "features")

        bin_edges: dict[str, list[float]] = {}
        for idx, spec in enumerate(cfg.histograms):
            if spec.is_metric:
                continue
            entry = merged.entry(spec.target)
            if entry.kind.value == "numeric":
                lo = entry.minimum if entry.minimum is not None else 0.0
                hi = entry.maximum if entry.maximum is not None else 1.0
                bin_edges[f"{idx}:{spec.target}"] = list(
                    numeric_bin_edges(lo, hi, spec.bin_count)
                )
        self._bin_edges = dict(bin_edges)

        bundles = {}
        for r in registrations:
            cid = r["client_id"]
            pair_seeds = {
                key: seed for key, seed in mask_seeds.items() if cid in key.split("|")
            }
            bundles[cid] = {
                "type": "init_bundle",
                "run_id": self.run_id,
                "round": 0,
                "client_id": cid,
                "config": cfg.to_dict(),
                "n_rows": index.n_rows,
                "row_map": {n: index[n] for n in r["node_ids"]},
                "merged_stats": serialize_merged(merged),
                "mask_seeds": pair_seeds,
                "projection_seed": projection_seed,
                "bin_edges": bin_edges,
                "participants": client_ids,
            }
        return index, merged, bundles

    # -- training -----------------------------------------------------------

    def _train_phase(
        self, phase, state, sg_cfg, ordered, rounds, control,
        metrics_sink, status, checkpoints, on_state,
    ) -> int:
        completed = 0
        round_no = 1
        while round_no <= rounds:
            action = control.poll() if control else None
            if action == "pause":
                status("paused")
                action = self._await_resume(control)
                if action != "resume":
                    break
                status("running")
            if action == "early_stop":
                break
            if action == "abort":
                raise AbortRun("aborted by operator")
            try:
                self._round(phase, state, ordered, round_no, metrics_sink)
            except TransportError as exc:
                logger.warning("round %d failed: %s", round_no, exc)
                if control is None:
                    raise
                status("paused")
                action = self._await_resume(control)
                if action != "resume":
                    break
                status("running")
                continue  # replay the same round
            completed = round_no
            if on_state is not None:
                on_state(round_no, state)
            if checkpoints is not None and round_no % self.config.checkpoint_every == 0:
                checkpoints[round_no] = self._freeze(state, round_no)
            round_no += 1
        return completed

    def _await_resume(self, control: RunControl | None) -> str:
        if control is None:
            return "resume"
        while True:
            action = control.wait()
            if action == "pause":
                continue
            if action == "abort":
                raise AbortRun("aborted by operator")
            return action

    def _broadcast_message(self, phase, round_no, client_id, state, final=False) -> dict:
        return {
            "type": "weights_broadcast",
            "run_id": self.run_id,
            "round": round_no,
            "client_id": client_id,
            "phase": phase,
            "final": final,
            "input_table": encode_matrix(state.input_table),
            "output_table": encode_matrix(state.output_table),
        }

    def _round(self, phase, state, ordered, round_no, metrics_sink) -> None:
        updates: list[dict] = []
        round_metrics: list[RoundMetrics] = []
        for endpoint in ordered:
            replies = self._exchange(
                endpoint,
                self._broadcast_message(phase, round_no, endpoint.client_id, state),
            )
            for reply in replies:
                if reply["type"] == "client_update":
                    updates.append(reply)
                elif reply["type"] == "round_metrics":
                    round_metrics.append(
                        RoundMetrics(
                            round_no=round_no,
                            client_id=reply["client_id"],
                            loss=reply["loss"],
                            duration_s=reply["duration_s"],
                            phase=reply["phase"],
                            probe_accuracy=reply["probe_accuracy"],
                        )
                    )
        valid = [u for u in updates if u["ok"]]
        for update in updates:
            if not update["ok"]:
                logger.warning(
                    "client %s failed round %d: %s",
                    update["client_id"], round_no, update["error"],
                )
        if valid:
            self._apply_updates(state, valid)
        else:
            logger.warning("round %d aborted: no valid client updates", round_no)
        metrics_sink(sorted(round_metrics, key=lambda m: m.client_id))

    def _apply_updates(self, state: EmbeddingModelState, updates: list[dict]) -> None:
        """Federated averaging with per-row denominators over touching clients.

        Clients upload updated row values; the per-client delta against the
        broadcast weights is derived here. A row touched by exactly one
        client takes its value directly (bitwise-exact round trip).
        """
        updates = sorted(updates, key=lambda u: u["client_id"])
        for table, rows_key, values_key in (
            (state.input_table, "input_rows", "input_values"),
            (state.output_table, "output_rows", "output_values"),
        ):
            contributions: dict[int, list[tuple[int, np.ndarray]]] = {}
            for update in updates:
                values = decode_matrix(update[values_key])
                weight = update["n_samples"]
                for pos, row in enumerate(update[rows_key]):
                    contributions.setdefault(row, []).append((weight, values[pos]))
            for row in sorted(contributions):
                parts = contributions[row]
                if len(parts) == 1:
                    table[row] = parts[0][1]
                    continue
                base = table[row]
                numerator = np.zeros_like(base)
                denominator = 0
                for weight, value in parts:
                    numerator += weight * (value - base)
                    denominator += weight
                table[row] = base + numerator / denominator

    def _freeze(self, state: EmbeddingModelState, round_no: int) -> CheckpointData:
        # Quantize to the on-disk float32 grid so in-memory and reloaded
        # checkpoints serve identical representations.
        tables = [
            state.input_table.astype("<f4").astype(np.float64),
            state.output_table.astype("<f4").astype(np.float64),
        ]
        return CheckpointData(
            round_no=round_no, config_hash=self.config.config_hash(), tables=tables
        )

    # -- attribute phase ------------------------------------------------------

    def _attribute_phase(self, state, ordered, merged, index, final_round):
        cfg = self.config
        uploads: dict[str, list[dict]] = {}
        stage_a: list[dict] = []
        for endpoint in ordered:
            replies = self._exchange(
                endpoint,
                self._broadcast_message("emb", final_round, endpoint.client_id, state, final=True),
            )
            stage_a.extend(r for r in replies if r["type"] == "attribute_upload")
        for upload in stage_a:
            uploads.setdefault(upload["client_id"], []).append(upload)

        metric_specs = [
            (idx, spec) for idx, spec in enumerate(cfg.histograms) if spec.is_metric
        ]
        if metric_specs:
            ranges: dict[str, list[float]] = {}
            for upload in stage_a:
                for metric, (lo, hi) in upload.get("metric_ranges", {}).items():
                    if metric in ranges:
                        ranges[metric][0] = min(ranges[metric][0], lo)
                        ranges[metric][1] = max(ranges[metric][1], hi)
                    else:
                        ranges[metric] = [lo, hi]
            metric_edges = {}
            for idx, spec in metric_specs:
                lo, hi = ranges[spec.target]
                metric_edges[f"{idx}:{spec.target}"] = list(
                    numeric_bin_edges(lo, hi, spec.bin_count)
                )
            self._bin_edges.update(metric_edges)
            for endpoint in ordered:
                bundle = {
                    "type": "init_bundle",
                    "run_id": self.run_id,
                    "round": final_round,
                    "client_id": endpoint.client_id,
                    "config": {},
                    "n_rows": 0,
                    "row_map": {},
                    "merged_stats": [],
                    "mask_seeds": {},
                    "projection_seed": 0,
                    "bin_edges": metric_edges,
                    "participants": [],
                }
                replies = self._send_bundle(endpoint, bundle)
                for reply in replies:
                    if reply["type"] == "attribute_upload":
                        uploads.setdefault(reply["client_id"], []).append(reply)

        return self._aggregate_attributes(uploads, merged, index)

    def _aggregate_attributes(self, uploads, merged, index):
        cfg = self.config
        client_ids = sorted(uploads)
        k = len(client_ids)
        if k == 0:
            raise DataError("no attribute uploads")

        histograms: list[AttributeHistogram] = []
        include_members = cfg.privacy.mechanism not in _DP_MECHANISMS
        bin_members: dict[str, list[list[int]]] = {} if include_members else None
        for idx, spec in enumerate(cfg.histograms):
            key = f"{idx}:{spec.target}"
            masked = []
            for cid in client_ids:
                for upload in uploads[cid]:
                    if key in upload["masked"]:
                        masked.append(decode_uint64(upload["masked"][key]))
            if len(masked) != k:
                raise DataError(f"histogram {key}: expected {k} uploads, got {len(masked)}")
            totals = unmask_sum(masked)
            counts = totals[:-1] / k  # federated mean over all clients
            suppressed_total = float(totals[-1])
            shell = self._histogram_shell(spec, merged, key)
            shell.counts = np.maximum(counts, 0.0)
            shell.mechanism = cfg.privacy.mechanism.value
            shell.suppressed_mass = suppressed_total
            histograms.append(shell)
            if include_members:
                union: list[set[int]] = [set() for _ in range(shell.bin_count)]
                for cid in client_ids:
                    for upload in uploads[cid]:
                        if upload["bin_members"] and key in upload["bin_members"]:
                            for b, rows in enumerate(upload["bin_members"][key]):
                                union[b].update(rows)
                bin_members[key] = [sorted(b) for b in union]

        features_sum = np.zeros((index.n_rows, cfg.skipgram.dimension))
        features_n = np.zeros(index.n_rows)
        for cid in client_ids:
            for upload in uploads[cid]:
                rows = upload["feature_rows"]
                if not rows:
                    continue
                block = decode_matrix(upload["features"])
                features_sum[rows] += block
                features_n[rows] += 1.0
        features = np.divide(
            features_sum,
            np.maximum(features_n, 1.0)[:, None],
        )
        # Same float32 quantization as checkpoints, so reloading a persisted
        # run serves identical representation payloads.
        features = features.astype("<f4").astype(np.float64)
        return histograms, bin_members, features

    def _histogram_shell(self, spec, merged, key) -> AttributeHistogram:
        # Mirror the shell the clients used, from the same shared bin edges.
        if spec.is_metric:
            edges = self._bin_edges.get(key, ())
            return AttributeHistogram(
                target=spec.target,
                kind="metric",
                counts=np.zeros(spec.bin_count),
                bin_edges=tuple(edges),
                filter_descriptor=self.config.filter.to_dict(),
            )
        entry = merged.entry(spec.target)
        if entry.kind.value == "numeric":
            return AttributeHistogram(
                target=spec.target,
                kind="numeric",
                counts=np.zeros(spec.bin_count),
                bin_edges=tuple(self._bin_edges.get(key, ())),
                filter_descriptor=self.config.filter.to_dict(),
            )
        return AttributeHistogram(
            target=spec.target,
            kind="categorical",
            counts=np.zeros(len(entry.categories)),
            categories=entry.categories,
            filter_descriptor=self.config.filter.to_dict(),
        )


def _schema_from_stats(stats_payload: list[dict]):
    from ..graph import AttributeKind, AttributeSchema

    return AttributeSchema(
        tuple((e["name"], AttributeKind(e["kind"])) for e in stats_payload)
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_result(result: RunResult, directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "checkpoints").mkdir(parents=True, exist_ok=True)
    with open(directory / "config.json", "w", encoding="utf-8") as fh:
        json.dump(result.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(directory / "metrics.ndjson", "w", encoding="utf-8") as fh:
        for record in result.metrics:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    for round_no, ckpt in sorted(result.checkpoints.items()):
        write_checkpoint(directory / "checkpoints" / f"emb_{round_no:05d}.bin", ckpt)
    if result.struc_final is not None:
        write_checkpoint(directory / "struc_final.bin", result.struc_final)
    features_ckpt = CheckpointData(
        round_no=result.final_round,
        config_hash=result.config.config_hash(),
        tables=[result.features],
    )
    write_checkpoint(directory / "features.bin", features_ckpt)
    meta = {
        "run_id": result.run_id,
        "status": result.status,
        "final_round": result.final_round,
        "clients": [c.to_dict() for c in result.client_infos],
        "histograms": [h.to_dict() for h in result.histograms],
        "bin_members": result.bin_members,
        "global_index": dict(result.global_index.id_to_row) if result.global_index else None,
    }
    with open(directory / "run.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if result.transcript:
        with open(directory / "transcript.ndjson", "w", encoding="utf-8") as fh:
            for record in result.transcript:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_result(directory: str | Path) -> RunResult:
    directory = Path(directory)
    config = RunConfig.from_dict(json.loads((directory / "config.json").read_text()))
    meta = json.loads((directory / "run.json").read_text())
    metrics = []
    metrics_path = directory / "metrics.ndjson"
    if metrics_path.exists():
        for line in metrics_path.read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                metrics.append(
                    RoundMetrics(
                        round_no=d["round"],
                        client_id=d["client_id"],
                        loss=d["loss"],
                        duration_s=d["duration_s"],
                        phase=d.get("phase", "emb"),
                        probe_accuracy=d.get("probe_accuracy"),
                    )
                )
    checkpoints = {}
    for path in sorted((directory / "checkpoints").glob("emb_*.bin")):
        ckpt = read_checkpoint(path)
        checkpoints[ckpt.round_no] = ckpt
    struc_path = directory / "struc_final.bin"
    struc_final = read_checkpoint(struc_path) if struc_path.exists() else None
    features = read_checkpoint(directory / "features.bin").tables[0]
    transcript = []
    transcript_path = directory / "transcript.ndjson"
    if transcript_path.exists():
        for line in transcript_path.read_text().splitlines():
            if line.strip():
                transcript.append(json.loads(line))
    index = GlobalIndex(id_to_row=meta["global_index"]) if meta.get("global_index") else None
    return RunResult(
        config=config,
        run_id=meta["run_id"],
        global_index=index,
        client_infos=[ClientInfo(**c) for c in meta["clients"]],
        metrics=metrics,
        checkpoints=checkpoints,
        struc_final=struc_final,
        histograms=[AttributeHistogram.from_dict(h) for h in meta["histograms"]],
        bin_members=meta.get("bin_members"),
        features=features,
        transcript=transcript,
        status=meta["status"],
        final_round=meta["final_round"],
    )
