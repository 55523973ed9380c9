"""Trainable embedding model: random-walk corpus, skip-gram with negative
sampling over a shared weight matrix, and attribute feature vectors.

The input table's rows are the node representations; training touches only
rows present in a batch, which keeps client updates sparse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, TrainingError
from .graph import AttributeKind, AttrValue, AttributeSchema, LocalGraph, MergedAttributeStats, tokenize
from .rng import make_rng


@dataclass(frozen=True)
class WalkConfig:
    walks_per_node: int = 80
    walk_length: int = 40
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.walks_per_node < 1:
            raise ConfigError("walks_per_node must be >= 1")
        if self.walk_length < 2:
            raise ConfigError("walk_length must be >= 2")


@dataclass(frozen=True)
class SkipGramConfig:
    dimension: int = 128
    window: int = 10
    negatives_per_positive: int = 5
    learning_rate: float = 0.025
    batch_size: int = 512

    def __post_init__(self) -> None:
        if self.dimension < 2:
            raise ConfigError("dimension must be >= 2")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        # 0 is allowed so a no-op step stays expressible (frozen-model probes).
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class EmbeddingModelState:
    """Input/output embedding tables; the input table is the representation."""

    input_table: np.ndarray
    output_table: np.ndarray
    index: Mapping[str, int] | None = None

    def __post_init__(self) -> None:
        if self.input_table.shape != self.output_table.shape:
            raise ConfigError("input/output tables must share one shape")
        if self.input_table.ndim != 2:
            raise ConfigError("tables must be 2-D")

    @property
    def n_rows(self) -> int:
        return self.input_table.shape[0]

    @property
    def dimension(self) -> int:
        return self.input_table.shape[1]

    def copy(self) -> "EmbeddingModelState":
        return EmbeddingModelState(
            input_table=self.input_table.copy(),
            output_table=self.output_table.copy(),
            index=self.index,
        )

    def check_finite(self) -> None:
        if not (np.isfinite(self.input_table).all() and np.isfinite(self.output_table).all()):
            raise TrainingError("embedding tables contain non-finite entries")


def init_model_state(
    n_rows: int, dimension: int, seed: int, index: Mapping[str, int] | None = None
) -> EmbeddingModelState:
    """Fresh state with both tables uniform in [-0.5/M, 0.5/M]."""
    rng = make_rng(seed, "model-init")
    bound = 0.5 / dimension
    return EmbeddingModelState(
        input_table=rng.uniform(-bound, bound, size=(n_rows, dimension)),
        output_table=rng.uniform(-bound, bound, size=(n_rows, dimension)),
        index=index,
    )


# ---------------------------------------------------------------------------
# Random walks
# ---------------------------------------------------------------------------


def generate_walks(
    g: LocalGraph, cfg: WalkConfig, index: Mapping[str, int]
) -> list[list[int]]:
    """``walks_per_node`` uniform random walks from every node, as row indices.

    Each walk's generator is seeded from (rng_seed, start node ID, walk number),
    so corpora are reproducible and do not depend on how many other nodes exist.
    A walk from an isolated node has length 1.
    """
    if g.node_count == 0:
        raise DataError("cannot walk an empty graph")
    missing = [n for n in g.node_ids if n not in index]
    if missing:
        raise DataError(f"global index does not cover local nodes: {missing[:5]}")
    adj = g.adjacency()
    walks: list[list[int]] = []
    for node in g.node_ids:
        for w in range(cfg.walks_per_node):
            rng = make_rng(cfg.rng_seed, "walk", node, w)
            walk = [node]
            while len(walk) < cfg.walk_length:
                neighbors = adj[walk[-1]]
                if not neighbors:
                    break
                walk.append(neighbors[int(rng.integers(len(neighbors)))])
            walks.append([index[n] for n in walk])
    return walks


def pairs_from_walks(walks: Sequence[Sequence[int]], window: int) -> np.ndarray:
    """All (center, context) pairs within the sliding window, corpus order."""
    centers: list[int] = []
    contexts: list[int] = []
    for walk in walks:
        length = len(walk)
        for i, center in enumerate(walk):
            lo = max(0, i - window)
            hi = min(length, i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    centers.append(center)
                    contexts.append(walk[j])
    if not centers:
        return np.empty((0, 2), dtype=np.int64)
    return np.stack([np.asarray(centers, dtype=np.int64), np.asarray(contexts, dtype=np.int64)], axis=1)


@dataclass
class NoiseDistribution:
    """Unigram^0.75 negative-sampling distribution over locally present rows."""

    rows: np.ndarray
    cumulative: np.ndarray

    @classmethod
    def from_corpus(cls, walks: Sequence[Sequence[int]], power: float = 0.75) -> "NoiseDistribution":
        counts: dict[int, int] = {}
        for walk in walks:
            for row in walk:
                counts[row] = counts.get(row, 0) + 1
        if not counts:
            raise DataError("empty walk corpus")
        rows = np.array(sorted(counts), dtype=np.int64)
        weights = np.array([counts[r] for r in rows], dtype=np.float64) ** power
        cumulative = np.cumsum(weights / weights.sum())
        cumulative[-1] = 1.0
        return cls(rows=rows, cumulative=cumulative)

    def sample(self, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        picks = np.searchsorted(self.cumulative, rng.random(shape), side="right")
        return self.rows[np.minimum(picks, len(self.rows) - 1)]


# ---------------------------------------------------------------------------
# Skip-gram with negative sampling
# ---------------------------------------------------------------------------


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), stable for large |x|
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class StepResult:
    loss: float
    input_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    output_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def batch_loss(
    state: EmbeddingModelState,
    batch: np.ndarray,
    cfg: SkipGramConfig,
    negatives: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    noise: NoiseDistribution | None = None,
) -> float:
    """Mean negative-sampling loss over the batch; 0 for an empty batch."""
    if len(batch) == 0:
        return 0.0
    if negatives is None:
        if rng is None or noise is None:
            raise ConfigError("either negatives or (rng, noise) must be supplied")
        negatives = noise.sample(rng, (len(batch), cfg.negatives_per_positive))
    centers = batch[:, 0]
    contexts = batch[:, 1]
    u = state.input_table[centers]
    v = state.output_table[contexts]
    vn = state.output_table[negatives]
    pos_score = np.einsum("bm,bm->b", u, v)
    neg_score = np.einsum("bm,bnm->bn", u, vn)
    loss = _softplus(-pos_score).sum() + _softplus(neg_score).sum()
    return float(loss / len(batch))


def minibatch_gradient_step(
    state: EmbeddingModelState,
    batch: np.ndarray,
    cfg: SkipGramConfig,
    rng: np.random.Generator | None = None,
    noise: NoiseDistribution | None = None,
    negatives: np.ndarray | None = None,
) -> StepResult:
    """One SGD step on the mean batch loss; mutates only rows the batch touches.

    Negatives default to draws from the unigram^0.75 distribution over locally
    present rows. Raises TrainingError on a non-finite gradient.
    """
    if len(batch) == 0:
        return StepResult(loss=0.0)
    if negatives is None:
        if rng is None or noise is None:
            raise ConfigError("either negatives or (rng, noise) must be supplied")
        negatives = noise.sample(rng, (len(batch), cfg.negatives_per_positive))
    n = len(batch)
    centers = batch[:, 0]
    contexts = batch[:, 1]
    u = state.input_table[centers]
    v = state.output_table[contexts]
    vn = state.output_table[negatives]

    pos_score = np.einsum("bm,bm->b", u, v)
    neg_score = np.einsum("bm,bnm->bn", u, vn)
    loss = float((_softplus(-pos_score).sum() + _softplus(neg_score).sum()) / n)

    g_pos = (_sigmoid(pos_score) - 1.0) / n
    g_neg = _sigmoid(neg_score) / n
    grad_u = g_pos[:, None] * v + np.einsum("bn,bnm->bm", g_neg, vn)
    grad_v = g_pos[:, None] * u
    grad_vn = g_neg[:, :, None] * u[:, None, :]

    if not (
        np.isfinite(grad_u).all() and np.isfinite(grad_v).all() and np.isfinite(grad_vn).all()
    ):
        raise TrainingError(
            f"non-finite gradient in batch of {n} pairs "
            f"(|u|max={np.abs(u).max():.3g}, |v|max={np.abs(v).max():.3g})"
        )

    lr = cfg.learning_rate
    np.add.at(state.input_table, centers, -lr * grad_u)
    np.add.at(state.output_table, contexts, -lr * grad_v)
    np.add.at(
        state.output_table,
        negatives.ravel(),
        (-lr * grad_vn).reshape(-1, state.dimension),
    )
    return StepResult(
        loss=loss,
        input_rows=np.unique(centers),
        output_rows=np.unique(np.concatenate([contexts, negatives.ravel()])),
    )


# ---------------------------------------------------------------------------
# Attribute feature vectors
# ---------------------------------------------------------------------------


def build_feature_vector(
    values: Sequence[AttrValue],
    schema: AttributeSchema,
    stats: MergedAttributeStats,
    warn: list[str] | None = None,
) -> np.ndarray:
    """Concatenated feature blocks for one node, in schema order.

    Categorical: one-hot over the merged category list. Text: binary token
    presence over the merged vocabulary. Numeric: (v - min) / (max - min),
    0 when max == min, clamped into [0, 1] when stats are stale. Missing
    values produce an all-zero block.
    """
    if len(values) != schema.attribute_count:
        raise DataError("value tuple does not match schema")
    blocks: list[np.ndarray] = []
    for value, (name, kind) in zip(values, schema.entries):
        entry = stats.entry(name)
        width = entry.feature_width
        block = np.zeros(width)
        if value is not None and not entry.empty:
            if kind is AttributeKind.NUMERIC:
                lo, hi = entry.minimum, entry.maximum
                if hi > lo:
                    scaled = (float(value) - lo) / (hi - lo)
                    if scaled < 0.0 or scaled > 1.0:
                        if warn is not None:
                            warn.append(f"{name}: value {value} outside merged [{lo}, {hi}]")
                        scaled = min(max(scaled, 0.0), 1.0)
                    block[0] = scaled
            elif kind is AttributeKind.CATEGORICAL:
                try:
                    block[entry.categories.index(str(value))] = 1.0
                except ValueError:
                    if warn is not None:
                        warn.append(f"{name}: unseen category {value!r}")
            else:
                present = set(tokenize(str(value)))
                for i, token in enumerate(entry.vocabulary):
                    if token in present:
                        block[i] = 1.0
        blocks.append(block)
    if not blocks:
        return np.zeros(0)
    return np.concatenate(blocks)


def build_feature_matrix(
    g: LocalGraph, stats: MergedAttributeStats, warn: list[str] | None = None
) -> np.ndarray:
    """Feature vectors for every local node, in node order."""
    return np.stack(
        [build_feature_vector(g.attributes[n], g.schema, stats, warn) for n in g.node_ids]
    ) if g.node_count else np.zeros((0, stats.feature_length))


def reduce_dimensions(features: np.ndarray, target_dim: int, seed: int) -> np.ndarray:
    """Seeded Gaussian random projection scaled by 1/sqrt(target_dim).

    When target_dim exceeds the feature length the features pass through
    unchanged and are zero-padded. The projection matrix depends only on
    (seed, feature length, target_dim), so every client builds the same one.
    """
    if target_dim < 1:
        raise ConfigError("target_dim must be >= 1")
    n, width = features.shape
    if width == 0:
        return np.zeros((n, target_dim))
    if target_dim > width:
        return np.hstack([features, np.zeros((n, target_dim - width))])
    rng = make_rng(seed, "feature-projection", width, target_dim)
    projection = rng.standard_normal((width, target_dim)) / np.sqrt(target_dim)
    return features @ projection


def compose_embedding(basic: np.ndarray, reduced: np.ndarray) -> np.ndarray:
    """[basic | reduced] per node; both halves must share the same width."""
    if basic.shape != reduced.shape:
        raise DataError(
            f"dimension mismatch: basic {basic.shape} vs reduced {reduced.shape}"
        )
    return np.hstack([basic, reduced])
