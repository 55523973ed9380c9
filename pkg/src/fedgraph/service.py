"""HTTP service backing the workbench: run lifecycle, live metrics, and
representation queries. The API serves projections, reconstructed edges, and
protected histograms only; raw attribute values and raw edges never leave
the clients."""

from __future__ import annotations

import json
import tempfile
import threading
import uuid
from pathlib import Path
from typing import Iterator
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.responses import StreamingResponse
from pydantic import BaseModel, Field

from .analysis import cluster, detect_anomalies, project
from .checkpoint import write_checkpoint
from .datasetup import build_client_nodes
from .errors import ConfigError, FedgraphError
from .federation import Coordinator, InProcessEndpoint, RunConfig, RunControl
from .federation.server import RoundMetrics, RunResult, load_result
from .representation import FederatedRepresentation

_TERMINAL = ("stopped", "finished", "failed")


class SelectionQuery(BaseModel):
    """Row selection and/or histogram-bin predicates from the linked views."""

    rows: list[int] | None = None
    bins: dict[str, list[int]] = Field(default_factory=dict)

    @classmethod
    def parse(cls, raw: str | None) -> "SelectionQuery":
        if not raw:
            return cls()
        try:
            return cls(**json.loads(raw))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"bad selection: {exc}") from exc

    def is_empty(self) -> bool:
        return self.rows is None and not self.bins


class RunSummary(BaseModel):
    run_id: str
    status: str
    rounds_total: int
    rounds_done: int
    checkpoints: list[int]
    clients: list[dict]


class MetricsPoint(BaseModel):
    round: int
    client_id: str
    loss: float
    duration_s: float
    phase: str
    probe_accuracy: float | None = None


class EmbeddingPayload(BaseModel):
    checkpoint: int
    rows: list[int]
    coords: list[list[float]]
    cluster_labels: list[int] | None = None
    anomaly_scores: list[float] | None = None
    anomaly_flagged: list[int] | None = None


class StructurePayload(BaseModel):
    checkpoint: int
    nodes: list[int]
    edges: list[list[int]]


class HistogramPayload(BaseModel):
    key: str
    target: str
    kind: str
    counts: list[float]
    bin_edges: list[float]
    categories: list[str]
    mechanism: str
    suppressed_mass: float
    selection_counts: list[float] | None = None


class AttributePayload(BaseModel):
    checkpoint: int
    histograms: list[HistogramPayload]


class ManagedRun:
    """One run's mutable service-side state."""

    def __init__(self, run_id: str, document: dict, root: Path | None) -> None:
        self.run_id = run_id
        self.document = document
        self.config = RunConfig.from_dict(document["run"])
        self.root = root
        self.status = "configured"
        self.control = RunControl()
        self.metrics: list[RoundMetrics] = []
        self.result: RunResult | None = None
        self.error: str | None = None
        self.early_stop_requested = False
        self._cv = threading.Condition()
        self._thread: threading.Thread | None = None
        self._rep_cache: dict[int, FederatedRepresentation] = {}

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        with self._cv:
            if self.status != "configured":
                raise ConfigError(f"cannot start a run in status {self.status!r}")
            self.status = "running"
        self._thread = threading.Thread(target=self._execute, daemon=True)
        self._thread.start()

    def _execute(self) -> None:
        try:
            nodes = build_client_nodes(self.document.get("data", {}))
            endpoints = [InProcessEndpoint(n) for n in nodes]
            workdir = self.root / self.run_id if self.root else None
            coordinator = Coordinator(self.config, run_id=self.run_id, workdir=workdir)
            result = coordinator.execute(
                endpoints,
                control=self.control,
                on_metrics=self._on_metrics,
                on_status=self._on_status,
            )
            with self._cv:
                self.result = result
                self.status = "stopped" if self.early_stop_requested else "finished"
                self._cv.notify_all()
        except Exception as exc:  # surfaced via the API, not the server log
            with self._cv:
                self.error = str(exc)
                self.status = "failed"
                self._cv.notify_all()

    def _on_metrics(self, record: RoundMetrics) -> None:
        with self._cv:
            self.metrics.append(record)
            self._cv.notify_all()

    def _on_status(self, status: str) -> None:
        with self._cv:
            if status == "finished":
                return  # terminal status is decided in _execute
            self.status = status
            self._cv.notify_all()

    def command(self, action: str) -> str:
        with self._cv:
            if self.status in _TERMINAL:
                raise ConfigError(f"run already {self.status}")
            if self.status == "configured":
                raise ConfigError("run not started")
            valid = {
                "pause": ("running",),
                "resume": ("paused",),
                "early_stop": ("running", "paused"),
            }
            if action not in valid:
                raise ConfigError(f"unknown action {action!r}")
            if self.status not in valid[action]:
                raise ConfigError(f"cannot {action} a run in status {self.status!r}")
            if action == "early_stop":
                self.early_stop_requested = True
            # Optimistic transition; the coordinator confirms at the next
            # round boundary (commands are queued, never lost).
            elif action == "pause":
                self.status = "paused"
            elif action == "resume":
                self.status = "running"
        self.control.post(action)
        if action == "early_stop":
            self.wait_terminal(timeout=600.0)
        return self.status

    def wait_terminal(self, timeout: float | None = None) -> None:
        with self._cv:
            self._cv.wait_for(lambda: self.status in _TERMINAL, timeout=timeout)

    # -- queries ------------------------------------------------------------

    def summary(self) -> RunSummary:
        result = self.result
        return RunSummary(
            run_id=self.run_id,
            status=self.status,
            rounds_total=self.config.rounds,
            rounds_done=max((m.round_no for m in self.metrics), default=0),
            checkpoints=result.checkpoint_rounds() if result else [],
            clients=[c.to_dict() for c in result.client_infos] if result else [],
        )

    def need_result(self) -> RunResult:
        if self.result is None:
            raise HTTPException(status_code=409, detail="run has no results yet")
        return self.result

    def representation(self, checkpoint: int | None) -> FederatedRepresentation:
        result = self.need_result()
        round_no = result.final_round if checkpoint is None else checkpoint
        chosen = result.checkpoint_at_or_before(round_no)
        if chosen not in self._rep_cache:
            self._rep_cache[chosen] = result.representation_at(chosen)
        return self._rep_cache[chosen]

    def resolve_selection(self, selection: SelectionQuery) -> set[int] | None:
        """Effective row set: explicit rows intersected with every bin predicate."""
        result = self.need_result()
        rows: set[int] | None = set(selection.rows) if selection.rows is not None else None
        for key, bins in selection.bins.items():
            if not result.bin_members or key not in result.bin_members:
                raise HTTPException(
                    status_code=422,
                    detail=f"no bin membership available for {key!r} (DP mechanism?)",
                )
            members = result.bin_members[key]
            matching: set[int] = set()
            for b in bins:
                if not 0 <= b < len(members):
                    raise HTTPException(status_code=422, detail=f"bin {b} out of range")
                matching.update(members[b])
            rows = matching if rows is None else rows & matching
        return rows


class RunManager:
    def __init__(self, root: str | Path | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self.runs: dict[str, ManagedRun] = {}
        if self.root is not None and self.root.exists():
            self._load_persisted()

    def _load_persisted(self) -> None:
        for run_dir in sorted(self.root.iterdir()):
            if not (run_dir / "run.json").exists():
                continue
            try:
                result = load_result(run_dir)
            except FedgraphError:
                continue
            document = {"run": result.config.to_dict()}
            managed = ManagedRun(run_dir.name, document, self.root)
            managed.result = result
            managed.metrics = list(result.metrics)
            managed.status = result.status
            self.runs[run_dir.name] = managed

    def create(self, document: dict) -> ManagedRun:
        if "run" not in document:
            raise ConfigError("run document needs a 'run' section")
        run_id = document.get("run_id") or uuid.uuid4().hex[:12]
        if run_id in self.runs:
            raise ConfigError(f"run {run_id!r} already exists")
        managed = ManagedRun(run_id, document, self.root)
        self.runs[run_id] = managed
        return managed

    def get(self, run_id: str) -> ManagedRun:
        run = self.runs.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return run


def create_app(manager: RunManager | None = None) -> FastAPI:
    manager = manager or RunManager()
    app = FastAPI(title="fedgraph", version="0.1.0")
    app.state.manager = manager

    @app.post("/runs")
    def create_run(document: dict) -> dict:
        try:
            managed = manager.create(document)
        except (ConfigError, FedgraphError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return {"run_id": managed.run_id, "status": managed.status}

    @app.get("/runs")
    def list_runs() -> list[RunSummary]:
        return [run.summary() for run in manager.runs.values()]

    @app.get("/runs/{run_id}")
    def get_run(run_id: str) -> RunSummary:
        return manager.get(run_id).summary()

    @app.post("/runs/{run_id}/start")
    def start_run(run_id: str) -> dict:
        run = manager.get(run_id)
        try:
            run.start()
        except ConfigError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return {"run_id": run_id, "status": run.status}

    @app.post("/runs/{run_id}/pause")
    def pause_run(run_id: str) -> dict:
        return _command(manager, run_id, "pause")

    @app.post("/runs/{run_id}/resume")
    def resume_run(run_id: str) -> dict:
        return _command(manager, run_id, "resume")

    @app.post("/runs/{run_id}/early_stop")
    def early_stop_run(run_id: str) -> dict:
        return _command(manager, run_id, "early_stop")

    @app.get("/runs/{run_id}/metrics")
    def stream_metrics(run_id: str) -> StreamingResponse:
        run = manager.get(run_id)
        return StreamingResponse(
            _metric_stream(run), media_type="text/event-stream"
        )

    @app.get("/runs/{run_id}/representation")
    def representation(
        run_id: str,
        component: str,
        checkpoint: int | None = None,
        selection: str | None = None,
        projection: str = Query("mds"),
        cluster_method: str | None = None,
        cluster_k: int = 2,
        eps: float = 0.5,
        min_pts: int = 5,
        contamination: float | None = None,
        seed: int = 0,
    ):
        run = manager.get(run_id)
        query = SelectionQuery.parse(selection)
        rep = run.representation(checkpoint)
        rows = run.resolve_selection(query)
        if component == "embedding":
            return _embedding_payload(
                rep, rows, projection, cluster_method, cluster_k, eps, min_pts,
                contamination, seed,
            )
        if component == "structure":
            return _structure_payload(rep, rows)
        if component == "attribute":
            return _attribute_payload(run, rep, rows)
        raise HTTPException(status_code=422, detail=f"unknown component {component!r}")

    @app.get("/runs/{run_id}/checkpoints/{round_no}")
    def download_checkpoint(run_id: str, round_no: int) -> Response:
        run = manager.get(run_id)
        result = run.need_result()
        if round_no not in result.checkpoints:
            raise HTTPException(status_code=404, detail=f"no checkpoint {round_no}")
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "ckpt.bin"
            write_checkpoint(path, result.checkpoints[round_no])
            payload = path.read_bytes()
        return Response(content=payload, media_type="application/octet-stream")

    return app


def _command(manager: RunManager, run_id: str, action: str) -> dict:
    run = manager.get(run_id)
    try:
        status = run.command(action)
    except ConfigError as exc:
        raise HTTPException(status_code=409, detail=str(exc)) from exc
    return {"run_id": run_id, "status": status}


def _metric_stream(run: ManagedRun) -> Iterator[str]:
    """History first, then the live tail, then one terminal event."""
    cursor = 0
    while True:
        with run._cv:
            run._cv.wait_for(
                lambda: len(run.metrics) > cursor or run.status in _TERMINAL,
                timeout=30.0,
            )
            batch = run.metrics[cursor:]
            cursor += len(batch)
            terminal = run.status in _TERMINAL and cursor == len(run.metrics)
            status = run.status
        for record in batch:
            point = MetricsPoint(
                round=record.round_no,
                client_id=record.client_id,
                loss=record.loss,
                duration_s=record.duration_s,
                phase=record.phase,
                probe_accuracy=record.probe_accuracy,
            )
            yield f"data: {point.model_dump_json()}\n\n"
        if terminal:
            yield f"event: end\ndata: {json.dumps({'status': status})}\n\n"
            return


def _embedding_payload(
    rep, rows, projection, cluster_method, cluster_k, eps, min_pts, contamination, seed
) -> EmbeddingPayload:
    coords = project(rep.w_emb, method=projection, seed=seed).coords
    selected = sorted(rows) if rows is not None else list(range(rep.w_emb.shape[0]))
    labels = None
    if cluster_method:
        params = {"k": cluster_k} if cluster_method == "kmeans" else {"eps": eps, "min_pts": min_pts}
        labels = [int(x) for x in cluster(rep.w_emb, cluster_method, params, seed)[selected]]
    scores = flagged = None
    if contamination is not None:
        result = detect_anomalies(rep.w_emb, {"contamination": contamination}, seed)
        scores = [float(result.scores[i]) for i in selected]
        flagged = [int(i) for i in result.flagged if rows is None or int(i) in rows]
    return EmbeddingPayload(
        checkpoint=rep.round_no,
        rows=selected,
        coords=[[float(a), float(b)] for a, b in coords[selected]],
        cluster_labels=labels,
        anomaly_scores=scores,
        anomaly_flagged=flagged,
    )


def _structure_payload(rep, rows) -> StructurePayload:
    edges = rep.w_struc
    if rows is not None:
        edges = [(i, j) for i, j in edges if i in rows and j in rows]
    involved = sorted({i for e in edges for i in e})  # isolated nodes omitted
    return StructurePayload(
        checkpoint=rep.round_no,
        nodes=involved,
        edges=[[int(i), int(j)] for i, j in edges],
    )


def _attribute_payload(run: ManagedRun, rep, rows) -> AttributePayload:
    result = run.need_result()
    payloads = []
    for idx, hist in enumerate(rep.w_att):
        key = f"{idx}:{hist.target}"
        selection_counts = None
        if rows is not None:
            members = (result.bin_members or {}).get(key)
            if members is not None:
                selection_counts = [float(len(set(m) & rows)) for m in members]
        payloads.append(
            HistogramPayload(
                key=key,
                target=hist.target,
                kind=hist.kind,
                counts=[float(c) for c in hist.counts],
                bin_edges=list(hist.bin_edges),
                categories=list(hist.categories),
                mechanism=hist.mechanism,
                suppressed_mass=hist.suppressed_mass,
                selection_counts=selection_counts,
            )
        )
    return AttributePayload(checkpoint=rep.round_no, histograms=payloads)


def main_serve(bind: str | None = None, root: str | None = None) -> None:
    import os

    import uvicorn

    bind = bind or os.environ.get("FEDGRAPH_BIND", "127.0.0.1:8000")
    host, _, port = bind.rpartition(":")
    app = create_app(RunManager(root))
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
