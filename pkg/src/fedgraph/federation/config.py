"""Run configuration: everything a reproducible federation run needs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from ..embedding import SkipGramConfig, WalkConfig
from ..errors import ConfigError
from ..privacy import PrivacyConfig
from ..representation import FilterCondition, HistogramSpec


@dataclass(frozen=True)
class RunConfig:
    clients: int = 1
    rounds: int = 300
    run_seed: int = 0
    checkpoint_every: int = 10
    model_emb: str = "deepwalk"
    model_struc: str | None = None  # None: reuse the embedding model's weights
    walk: WalkConfig = field(default_factory=WalkConfig)
    skipgram: SkipGramConfig = field(default_factory=SkipGramConfig)
    struc_skipgram: SkipGramConfig | None = None
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    histograms: tuple[HistogramSpec, ...] = ()
    filter: FilterCondition = field(default_factory=FilterCondition)
    target_edges: int | None = None  # None: mean of client edge counts
    max_edges: int | None = None
    struc_metric: str = "euclidean"
    struc_jitter: float = 0.0
    clients_per_round: int | None = None  # None: all clients

    def __post_init__(self) -> None:
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.model_emb != "deepwalk":
            raise ConfigError(f"unknown embedding model {self.model_emb!r}")
        if self.model_struc not in (None, "deepwalk"):
            raise ConfigError(f"unknown structure model {self.model_struc!r}")
        if self.struc_metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown structure metric {self.struc_metric!r}")

    @property
    def trains_structure_separately(self) -> bool:
        return self.model_struc is not None and self.struc_skipgram is not None

    def to_dict(self) -> dict:
        data = asdict(self)
        data["privacy"]["mechanism"] = self.privacy.mechanism.value
        data["histograms"] = [
            {"target": h.target, "bin_count": h.bin_count} for h in self.histograms
        ]
        data["filter"] = self.filter.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "walk" in data and isinstance(data["walk"], dict):
            data["walk"] = WalkConfig(**data["walk"])
        if "skipgram" in data and isinstance(data["skipgram"], dict):
            data["skipgram"] = SkipGramConfig(**data["skipgram"])
        if data.get("struc_skipgram") and isinstance(data["struc_skipgram"], dict):
            data["struc_skipgram"] = SkipGramConfig(**data["struc_skipgram"])
        if "privacy" in data and isinstance(data["privacy"], dict):
            data["privacy"] = PrivacyConfig(**data["privacy"])
        if "histograms" in data:
            data["histograms"] = tuple(
                h if isinstance(h, HistogramSpec) else HistogramSpec(**h)
                for h in data["histograms"]
            )
        if "filter" in data and isinstance(data["filter"], dict):
            data["filter"] = FilterCondition.from_dict(data["filter"])
        return cls(**data)

    def config_hash(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()
