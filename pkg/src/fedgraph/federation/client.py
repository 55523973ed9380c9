"""Client-side federation logic: one party's local training and uploads.

A client is stateless across training rounds apart from its immutable walk
corpus: every round starts from the weights the coordinator broadcast, so a
round can be replayed safely after a transport failure.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..embedding import (
    EmbeddingModelState,
    NoiseDistribution,
    SkipGramConfig,
    build_feature_matrix,
    generate_walks,
    minibatch_gradient_step,
    pairs_from_walks,
    reduce_dimensions,
)
from ..errors import ConfigError, ProtocolError, TrainingError
from ..graph import (
    AttributeKind,
    AttributeStatsEntry,
    LocalAttributeStats,
    LocalGraph,
    MergedAttributeEntry,
    MergedAttributeStats,
    TopologyMetricKind,
    local_attribute_stats,
    topology_metric,
)
from ..privacy import Mechanism, l_diversify, mask, protect_histogram
from ..representation import HistogramSpec, assign_bins
from ..rng import make_rng
from .config import RunConfig
from .messages import decode_matrix, encode_matrix, encode_uint64

_DP_MECHANISMS = (Mechanism.LAPLACE, Mechanism.EXPONENTIAL)


def serialize_stats(stats: LocalAttributeStats) -> list[dict]:
    out = []
    for e in stats.entries:
        out.append(
            {
                "name": e.name,
                "kind": e.kind.value,
                "empty": e.empty,
                "min": e.minimum,
                "max": e.maximum,
                "categories": sorted(e.categories),
                "token_doc_counts": dict(sorted(e.token_doc_counts.items())),
            }
        )
    return out


def deserialize_stats(data: list[dict]) -> LocalAttributeStats:
    from collections import Counter

    entries = []
    for e in data:
        entries.append(
            AttributeStatsEntry(
                name=e["name"],
                kind=AttributeKind(e["kind"]),
                empty=e["empty"],
                minimum=e["min"],
                maximum=e["max"],
                categories=frozenset(e["categories"]),
                token_doc_counts=Counter(e["token_doc_counts"]),
            )
        )
    return LocalAttributeStats(entries=tuple(entries))


def serialize_merged(stats: MergedAttributeStats) -> list[dict]:
    return [
        {
            "name": e.name,
            "kind": e.kind.value,
            "empty": e.empty,
            "min": e.minimum,
            "max": e.maximum,
            "categories": list(e.categories),
            "vocabulary": list(e.vocabulary),
        }
        for e in stats.entries
    ]


def deserialize_merged(data: list[dict]) -> MergedAttributeStats:
    return MergedAttributeStats(
        entries=tuple(
            MergedAttributeEntry(
                name=e["name"],
                kind=AttributeKind(e["kind"]),
                empty=e["empty"],
                minimum=e["min"],
                maximum=e["max"],
                categories=tuple(e["categories"]),
                vocabulary=tuple(e["vocabulary"]),
            )
            for e in data
        )
    )


@dataclass
class ClientNode:
    """One party: holds the private graph, answers coordinator messages."""

    client_id: str
    graph: LocalGraph
    run_id: str = ""
    config: RunConfig | None = None
    row_map: dict[str, int] = field(default_factory=dict)
    merged_stats: MergedAttributeStats | None = None
    mask_seeds: dict[str, int] = field(default_factory=dict)
    participants: list[str] = field(default_factory=list)
    projection_seed: int = 0
    bin_edges: dict[str, list[float]] = field(default_factory=dict)
    _pairs: np.ndarray | None = None
    _noise: NoiseDistribution | None = None
    _metric_cache: dict[str, dict[str, float]] = field(default_factory=dict)

    # -- registration -------------------------------------------------------

    def register_message(self, run_id: str) -> dict:
        self.run_id = run_id
        return {
            "type": "register",
            "run_id": run_id,
            "round": 0,
            "client_id": self.client_id,
            "node_ids": list(self.graph.node_ids),
            "node_count": self.graph.node_count,
            "edge_count": self.graph.edge_count,
            "attr_stats": serialize_stats(local_attribute_stats(self.graph, self.graph.schema)),
            "metric_ranges": {},
        }

    # -- initialization -----------------------------------------------------

    def handle_init(self, bundle: dict) -> list[dict]:
        if bundle.get("config"):
            self.config = RunConfig.from_dict(bundle["config"])
            self.row_map = {k: int(v) for k, v in bundle["row_map"].items()}
            self.merged_stats = deserialize_merged(bundle["merged_stats"])
            self.mask_seeds = dict(bundle["mask_seeds"])
            self.participants = list(bundle["participants"])
            self.projection_seed = int(bundle["projection_seed"])
            self.bin_edges.update(bundle.get("bin_edges", {}))
            walks = generate_walks(self.graph, self.config.walk, self.row_map)
            self._pairs = pairs_from_walks(walks, self.config.skipgram.window)
            self._noise = NoiseDistribution.from_corpus(walks)
            return []
        # Late settings: bin edges for metric histograms, answered with the
        # corresponding masked uploads.
        self.bin_edges.update(bundle.get("bin_edges", {}))
        upload = self._attribute_upload(metric_stage=True)
        return [upload]

    # -- training -----------------------------------------------------------

    def handle_broadcast(self, msg: dict) -> list[dict]:
        if self.config is None:
            raise ProtocolError("broadcast before initialization")
        phase = msg["phase"]
        round_no = int(msg["round"])
        input_table = decode_matrix(msg["input_table"])
        output_table = decode_matrix(msg["output_table"])
        if msg["final"]:
            return [self._attribute_upload(metric_stage=False)]
        started = time.perf_counter()
        try:
            update, loss = self._training_round(phase, round_no, input_table, output_table)
        except TrainingError as exc:
            update = self._update_message(
                phase, round_no, ok=False, error=str(exc),
                input_rows=[], input_values=np.zeros((0, 0)),
                output_rows=[], output_values=np.zeros((0, 0)), n_samples=1,
            )
            loss = float("nan")
        metrics = {
            "type": "round_metrics",
            "run_id": self.run_id,
            "round": round_no,
            "client_id": self.client_id,
            "phase": phase,
            "loss": loss if np.isfinite(loss) else -1.0,
            "duration_s": time.perf_counter() - started,
            "probe_accuracy": None,
        }
        return [update, metrics]

    def _skipgram_config(self, phase: str) -> SkipGramConfig:
        if phase == "struc":
            if self.config.struc_skipgram is None:
                raise ConfigError("structure phase without struc_skipgram config")
            return self.config.struc_skipgram
        return self.config.skipgram

    def _training_round(
        self, phase: str, round_no: int, input_table: np.ndarray, output_table: np.ndarray
    ) -> tuple[dict, float]:
        cfg = self._skipgram_config(phase)
        state = EmbeddingModelState(input_table, output_table)
        pairs = self._pairs
        seed = self.config.run_seed
        order = make_rng(seed, phase, "order", round_no).permutation(len(pairs))
        touched_in: set[int] = set()
        touched_out: set[int] = set()
        loss_total = 0.0
        for batch_no, start in enumerate(range(0, len(pairs), cfg.batch_size)):
            batch = pairs[order[start : start + cfg.batch_size]]
            rng = make_rng(seed, phase, "negatives", round_no, batch_no)
            result = minibatch_gradient_step(state, batch, cfg, rng=rng, noise=self._noise)
            touched_in.update(int(r) for r in result.input_rows)
            touched_out.update(int(r) for r in result.output_rows)
            loss_total += result.loss * len(batch)
        state.check_finite()
        mean_loss = loss_total / len(pairs) if len(pairs) else 0.0
        in_rows = sorted(touched_in)
        out_rows = sorted(touched_out)
        # The upload carries the updated rows; the coordinator knows the
        # broadcast weights, so the delta is derivable server-side and a
        # single-toucher row round-trips bitwise exactly.
        update = self._update_message(
            phase,
            round_no,
            ok=True,
            error=None,
            input_rows=in_rows,
            input_values=state.input_table[in_rows],
            output_rows=out_rows,
            output_values=state.output_table[out_rows],
            # Averaging weight: local training samples (walk-derived pairs).
            n_samples=max(1, len(pairs)),
        )
        return update, mean_loss

    def _update_message(
        self, phase, round_no, ok, error, input_rows, input_values, output_rows, output_values, n_samples
    ) -> dict:
        return {
            "type": "client_update",
            "run_id": self.run_id,
            "round": round_no,
            "client_id": self.client_id,
            "phase": phase,
            "ok": ok,
            "error": error,
            "input_rows": [int(r) for r in input_rows],
            "input_values": encode_matrix(np.asarray(input_values, dtype=np.float64)),
            "output_rows": [int(r) for r in output_rows],
            "output_values": encode_matrix(np.asarray(output_values, dtype=np.float64)),
            "n_samples": int(n_samples),
        }

    # -- attribute phase ----------------------------------------------------

    def _hist_key(self, idx: int, spec: HistogramSpec) -> str:
        return f"{idx}:{spec.target}"

    def _metric_values(self, metric: str) -> dict[str, float]:
        if metric not in self._metric_cache:
            self._metric_cache[metric] = topology_metric(
                self.graph, TopologyMetricKind(metric)
            )
        return self._metric_cache[metric]

    def metric_ranges_for_config(self) -> dict[str, list[float]]:
        """Local [min, max] per metric named by a configured histogram."""
        ranges: dict[str, list[float]] = {}
        for spec in self.config.histograms:
            if spec.is_metric and spec.target not in ranges:
                values = list(self._metric_values(spec.target).values())
                ranges[spec.target] = [min(values), max(values)]
        return ranges

    def _attribute_upload(self, metric_stage: bool) -> dict:
        """Protected, masked histograms plus (first stage) reduced features.

        The first stage covers schema attributes and reports local metric
        ranges so the coordinator can fix shared metric bin edges; the second
        stage covers the metric histograms with those edges.
        """
        if self.config is None or self.merged_stats is None:
            raise ProtocolError("attribute phase before initialization")
        cfg = self.config
        masked: dict[str, dict] = {}
        members: dict[str, list[list[int]]] = {}
        include_members = cfg.privacy.mechanism not in _DP_MECHANISMS
        for idx, spec in enumerate(cfg.histograms):
            if spec.is_metric != metric_stage:
                continue
            key = self._hist_key(idx, spec)
            metric_values = self._metric_values(spec.target) if spec.is_metric else None
            edges = self.bin_edges.get(key)
            if spec.is_metric and edges is None:
                raise ProtocolError(f"no shared bin edges for metric histogram {key}")
            assignment, shell = assign_bins(
                self.graph, spec, self.merged_stats, cfg.filter,
                bin_edges=edges, metric_values=metric_values,
            )
            counts = np.bincount(
                assignment[assignment >= 0], minlength=shell.bin_count
            ).astype(np.float64)
            protected, suppressed_bins = self._protect(key, spec, assignment, counts)
            payload = np.concatenate([protected, [self._suppressed_mass(counts, protected)]])
            masked[key] = encode_uint64(
                mask(payload, self.client_id, self.participants, idx, self.mask_seeds)
            )
            if include_members:
                bins: list[list[int]] = []
                for b in range(shell.bin_count):
                    if b in suppressed_bins:
                        bins.append([])
                    else:
                        local = np.flatnonzero(assignment == b)
                        bins.append(
                            sorted(self.row_map[self.graph.node_ids[i]] for i in local)
                        )
                members[key] = bins

        upload = {
            "type": "attribute_upload",
            "run_id": self.run_id,
            "round": cfg.rounds,
            "client_id": self.client_id,
            "masked": masked,
            "bin_members": members if include_members else None,
            "feature_rows": [],
            "features": encode_matrix(np.zeros((0, 0))),
        }
        if not metric_stage:
            features = build_feature_matrix(self.graph, self.merged_stats)
            reduced = reduce_dimensions(
                features, cfg.skipgram.dimension, self.projection_seed
            )
            upload["feature_rows"] = [self.row_map[n] for n in self.graph.node_ids]
            upload["features"] = encode_matrix(reduced)
            upload["metric_ranges"] = self.metric_ranges_for_config()
        else:
            upload["metric_ranges"] = {}
        return upload

    def _protect(
        self, key: str, spec: HistogramSpec, assignment: np.ndarray, counts: np.ndarray
    ) -> tuple[np.ndarray, set[int]]:
        """Apply the run's protection mechanism to one histogram."""
        privacy = self.config.privacy
        if privacy.mechanism is Mechanism.L_DIVERSITY:
            sensitive = self._sensitive_column()
            records = [
                (int(assignment[i]), sensitive[i])
                for i in range(len(assignment))
                if assignment[i] >= 0 and sensitive[i] is not None
            ]
            released = dict(l_diversify(records, privacy.l))
            protected = np.zeros_like(counts)
            for b, count in released.items():
                protected[b] = count
            suppressed = {b for b in range(len(counts)) if counts[b] > 0 and b not in released}
            return protected, suppressed
        rng = make_rng(self.config.run_seed, "adpm", self.client_id, key)
        protected, report = protect_histogram(counts, privacy, rng)
        return protected, set(report.suppressed_bins)

    def _sensitive_column(self):
        privacy = self.config.privacy
        name = privacy.sensitive_attribute
        if name is None:
            categorical = [
                n for n, k in self.graph.schema.entries if k is AttributeKind.CATEGORICAL
            ]
            if not categorical:
                raise ConfigError("l_diversity needs a categorical sensitive attribute")
            name = categorical[-1]
        return self.graph.attribute_column(name)

    @staticmethod
    def _suppressed_mass(raw: np.ndarray, protected: np.ndarray) -> float:
        return float(max(raw.sum() - protected.sum(), 0.0))
