"""Downstream analytics over federated representations: 2-D projection,
clustering, anomaly detection, and embedding-quality evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from sklearn.cluster import DBSCAN
from sklearn.ensemble import IsolationForest

from .errors import ConfigError, DataError
from .rng import derive_seed, make_rng


@dataclass
class ProjectionResult:
    coords: np.ndarray  # (N, 2)
    method: str
    params: dict = field(default_factory=dict)


def project(
    X: np.ndarray, method: str = "mds", params: dict | None = None, seed: int = 0
) -> ProjectionResult:
    """Project rows of X to 2-D via classical MDS or exact t-SNE."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 3:
        raise DataError("projection needs at least 3 rows")
    params = dict(params or {})
    if method == "mds":
        coords = _classical_mds(X)
    elif method == "tsne":
        perplexity = float(params.get("perplexity", 30.0))
        iterations = int(params.get("iterations", 1000))
        coords = _tsne(X, perplexity, iterations, seed)
    else:
        raise ConfigError(f"unknown projection method {method!r}")
    if not np.isfinite(coords).all():
        raise DataError("projection produced non-finite coordinates")
    return ProjectionResult(coords=coords, method=method, params=params)


def _classical_mds(X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    sq = np.einsum("nd,nd->n", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    if np.allclose(d2, 0.0):
        warnings.warn("all rows identical; MDS returns zero coordinates")
        return np.zeros((n, 2))
    centering = np.eye(n) - np.full((n, n), 1.0 / n)
    b = -0.5 * centering @ d2 @ centering
    eigenvalues, eigenvectors = np.linalg.eigh(b)
    order = np.argsort(eigenvalues)[::-1]
    coords = np.zeros((n, 2))
    for axis, idx in enumerate(order[:2]):
        if eigenvalues[idx] <= 0:
            break
        column = eigenvectors[:, idx] * math.sqrt(eigenvalues[idx])
        # Deterministic orientation: largest-magnitude entry is positive.
        anchor = np.argmax(np.abs(column))
        if column[anchor] < 0:
            column = -column
        coords[:, axis] = column
    return coords


def _tsne(X: np.ndarray, perplexity: float, iterations: int, seed: int) -> np.ndarray:
    """Exact O(N^2) t-SNE with the standard momentum/gain schedule."""
    n = X.shape[0]
    perplexity = min(perplexity, (n - 1) / 3.0)
    perplexity = max(perplexity, 1.0)
    p = _joint_probabilities(X, perplexity)

    rng = make_rng(seed, "tsne-init")
    y = rng.standard_normal((n, 2)) * 1e-4
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    learning_rate = 200.0
    exaggeration_until = min(100, iterations // 4)
    p_run = p * 4.0

    for it in range(iterations):
        if it == exaggeration_until:
            p_run = p
        sq = np.einsum("nd,nd->n", y, y)
        num = 1.0 / (1.0 + sq[:, None] + sq[None, :] - 2.0 * (y @ y.T))
        np.fill_diagonal(num, 0.0)
        q = num / num.sum()
        np.maximum(q, 1e-12, out=q)
        pq = (p_run - q) * num
        grad = 4.0 * ((np.diag(pq.sum(axis=1)) - pq) @ y)

        momentum = 0.5 if it < 250 else 0.8
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return y


def _joint_probabilities(X: np.ndarray, perplexity: float) -> np.ndarray:
    n = X.shape[0]
    sq = np.einsum("nd,nd->n", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    target_entropy = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        row = np.delete(d2[i], i)
        beta_lo, beta_hi = 0.0, math.inf
        beta = 1.0
        for _ in range(64):
            weights = np.exp(-row * beta)
            total = weights.sum()
            if total <= 0:
                entropy, probs = 0.0, weights
            else:
                probs = weights / total
                nz = probs > 0
                entropy = -np.sum(probs[nz] * np.log(probs[nz]))
            if abs(entropy - target_entropy) < 1e-7:
                break
            if entropy > target_entropy:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi is math.inf else (beta + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == 0.0 else (beta + beta_lo) / 2.0
        probs = np.insert(probs, i, 0.0)
        p[i] = probs
    p = (p + p.T) / (2.0 * n)
    np.maximum(p, 1e-12, out=p)
    return p


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)


def kmeans(
    X: np.ndarray, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300
) -> KMeansResult:
    """k-means++ seeded Lloyd iterations, best of ``restarts`` (capped at 50)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > n:
        raise DataError(f"k={k} exceeds {n} rows")
    restarts = min(max(restarts, 1), 50)
    best: KMeansResult | None = None
    for r in range(restarts):
        rng = make_rng(seed, "kmeans", r)
        result = _kmeans_single(X, k, rng, max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def _kmeans_single(
    X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int
) -> KMeansResult:
    n = X.shape[0]
    centers = _kmeanspp_init(X, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    history: list[float] = []
    for _ in range(max_iter):
        d2 = _sq_distances(X, centers)
        new_labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), new_labels].sum())
        history.append(inertia)
        for c in range(k):
            members = X[new_labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            else:
                # Re-seat an empty cluster at the worst-fit point.
                worst = int(d2[np.arange(n), new_labels].argmax())
                centers[c] = X[worst]
                new_labels[worst] = c
        if np.array_equal(new_labels, labels) and len(history) > 1:
            labels = new_labels
            break
        labels = new_labels
    d2 = _sq_distances(X, centers)
    inertia = float(d2[np.arange(n), labels].sum())
    return KMeansResult(labels=labels, centers=centers, inertia=inertia, inertia_history=history)


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    closest = _sq_distances(X, centers[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[c] = X[int(rng.integers(n))]
        else:
            draw = rng.random() * total
            centers[c] = X[int(np.searchsorted(np.cumsum(closest), draw))]
        closest = np.minimum(closest, _sq_distances(X, centers[c : c + 1]).ravel())
    return centers


def _sq_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def cluster(
    X: np.ndarray, method: str = "kmeans", params: dict | None = None, seed: int = 0
) -> np.ndarray:
    """Per-row cluster labels; DBSCAN noise points get label -1."""
    X = np.asarray(X, dtype=np.float64)
    params = dict(params or {})
    if method == "kmeans":
        return kmeans(
            X,
            k=int(params.get("k", 2)),
            seed=seed,
            restarts=int(params.get("restarts", 10)),
        ).labels
    if method == "dbscan":
        eps = float(params.get("eps", 0.5))
        min_pts = int(params.get("min_pts", 5))
        if eps <= 0 or min_pts < 1:
            raise ConfigError("dbscan needs eps > 0 and min_pts >= 1")
        return DBSCAN(eps=eps, min_samples=min_pts).fit(X).labels_
    raise ConfigError(f"unknown clustering method {method!r}")


# ---------------------------------------------------------------------------
# Anomaly detection
# ---------------------------------------------------------------------------


@dataclass
class AnomalyResult:
    scores: np.ndarray  # path-length anomaly score in (0, 1]
    flagged: np.ndarray  # row indices, highest score first


def detect_anomalies(
    X: np.ndarray, params: dict | None = None, seed: int = 0
) -> AnomalyResult:
    """Isolation-forest scores plus the top contamination fraction, flagged.

    100 trees on subsamples of 256 (clamped to N); the flagged set has
    exactly ceil(contamination * N) rows, ties broken by row index.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 8:
        raise DataError("anomaly detection needs at least 8 rows")
    params = dict(params or {})
    n_trees = int(params.get("n_trees", 100))
    subsample = min(int(params.get("subsample", 256)), n)
    contamination = float(params.get("contamination", 0.05))
    if not 0.0 <= contamination <= 0.5:
        raise ConfigError("contamination must be in [0, 0.5]")
    forest = IsolationForest(
        n_estimators=n_trees,
        max_samples=subsample,
        random_state=derive_seed(seed, "iforest") % (2**32),
    ).fit(X)
    scores = -forest.score_samples(X)
    flag_count = math.ceil(contamination * n)
    order = np.lexsort((np.arange(n), -scores))
    return AnomalyResult(scores=scores, flagged=order[:flag_count])


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------


def benchmark_attribute_aggregation(
    n_clients: int,
    n_attributes: int,
    n_nodes: int,
    bins: int = 16,
    seed: int = 0,
    repeats: int = 5,
) -> float:
    """Wall seconds for one protected, masked attribute aggregation.

    Times the release pipeline (protect, mask, unmask, federated mean) over
    pre-extracted per-client histograms; the histogram contents derive from
    ``n_nodes`` values but the timed work depends only on clients, attributes,
    and bin count. Returns the minimum over ``repeats`` measurements.
    """
    from time import perf_counter

    from .privacy import Mechanism, PrivacyConfig, make_mask_seeds, mask, protect_histogram, unmask_sum

    rng = make_rng(seed, "agg-bench", n_clients, n_attributes, n_nodes)
    client_ids = [f"c{i:03d}" for i in range(n_clients)]
    seeds = make_mask_seeds(client_ids, run_seed=seed)
    cfg = PrivacyConfig(mechanism=Mechanism.K_ANONYMITY, k=2)
    histograms = {
        cid: [
            np.bincount(rng.integers(0, bins, size=n_nodes), minlength=bins).astype(float)
            for _ in range(n_attributes)
        ]
        for cid in client_ids
    }

    best = math.inf
    for _ in range(repeats):
        start = perf_counter()
        uploads = {}
        for cid in client_ids:
            masked = []
            for a in range(n_attributes):
                protected, _ = protect_histogram(histograms[cid][a], cfg)
                masked.append(mask(protected, cid, client_ids, a, seeds))
            uploads[cid] = masked
        means = [
            unmask_sum([uploads[cid][a] for cid in client_ids]) / n_clients
            for a in range(n_attributes)
        ]
        assert len(means) == n_attributes
        best = min(best, perf_counter() - start)
    return best


def linear_fit_r_squared(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line through (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    predicted = slope * x + intercept
    residual = float(((y - predicted) ** 2).sum())
    total = float(((y - y.mean()) ** 2).sum())
    return 1.0 - residual / total if total > 0 else 1.0


@dataclass
class EvaluationReport:
    accuracy_mean: float | None = None
    accuracy_std: float | None = None
    link_auc: float | None = None
    precision_at_l: float | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for value in (self.accuracy_mean, self.link_auc, self.precision_at_l):
            if value is not None and not (0.0 <= value <= 1.0):
                raise DataError(f"metric out of [0, 1]: {value}")

    def to_dict(self) -> dict:
        return {
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
            "link_auc": self.link_auc,
            "precision_at_l": self.precision_at_l,
            "config": self.config,
        }


def stratified_folds(labels: Sequence[Hashable], folds: int) -> np.ndarray:
    """Fold index per sample: round-robin within each class, input order."""
    labels = list(labels)
    assignment = np.zeros(len(labels), dtype=np.int64)
    by_class: dict[Hashable, int] = {}
    for i, label in enumerate(labels):
        position = by_class.get(label, 0)
        assignment[i] = position % folds
        by_class[label] = position + 1
    small = [label for label, count in by_class.items() if count < folds]
    if small:
        raise DataError(f"classes with fewer than {folds} members: {small}")
    return assignment


def _logistic_probe(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
    n_classes: int,
    epochs: int = 500,
    lr: float = 0.1,
    l2: float = 1e-4,
) -> np.ndarray:
    """Multinomial logistic regression by full-batch gradient descent."""
    n, d = x_train.shape
    weights = np.zeros((d, n_classes))
    bias = np.zeros(n_classes)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_train] = 1.0
    for _ in range(epochs):
        logits = x_train @ weights + bias
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        grad_logits = (probs - onehot) / n
        weights -= lr * (x_train.T @ grad_logits + l2 * weights)
        bias -= lr * grad_logits.sum(axis=0)
    return np.argmax(x_test @ weights + bias, axis=1)


def eval_classification(
    X: np.ndarray, labels: Sequence[Hashable], folds: int = 5, seed: int = 0
) -> tuple[float, float]:
    """Stratified k-fold accuracy of a logistic probe on the embeddings."""
    X = np.asarray(X, dtype=np.float64)
    classes = sorted(set(labels), key=repr)
    if len(classes) < 2:
        raise DataError("need at least 2 classes")
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[label] for label in labels], dtype=np.int64)
    fold_of = stratified_folds(labels, folds)
    accuracies = []
    for fold in range(folds):
        test = fold_of == fold
        predictions = _logistic_probe(X[~test], y[~test], X[test], len(classes))
        accuracies.append(float(np.mean(predictions == y[test])))
    return float(np.mean(accuracies)), float(np.std(accuracies))


def _pair_distance(embeddings: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    diff = embeddings[pairs[:, 0]] - embeddings[pairs[:, 1]]
    return np.sqrt(np.einsum("nd,nd->n", diff, diff))


def eval_link_auc(
    embeddings: np.ndarray,
    positive_edges: Sequence[tuple[int, int]],
    sample_count: int = 10_000_000,
    seed: int = 0,
    exclude_edges: Sequence[tuple[int, int]] = (),
) -> float:
    """Probability that a random true edge outscores a random non-edge, with
    score = -distance. Pairs in ``exclude_edges`` (training edges in a holdout
    protocol) count as neither positive nor negative. Exact (rank-based over
    every pair) whenever the pair universe fits in the sample budget,
    otherwise Monte Carlo."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    positives = {(min(i, j), max(i, j)) for i, j in positive_edges}
    excluded = {(min(i, j), max(i, j)) for i, j in exclude_edges} - positives
    if not positives:
        raise DataError("no positive pairs")
    total_pairs = n * (n - 1) // 2
    n_pos = len(positives)
    n_neg = total_pairs - n_pos - len(excluded)
    if n_neg < 1:
        raise DataError("no negative pairs")

    if total_pairs <= max(sample_count, 2_000_000):
        iu, ju = np.triu_indices(n, k=1)
        if excluded:
            keep = np.fromiter(
                ((int(i), int(j)) not in excluded for i, j in zip(iu, ju)),
                dtype=bool,
                count=total_pairs,
            )
            iu, ju = iu[keep], ju[keep]
        kept = len(iu)
        dists = _pair_distance(embeddings, np.stack([iu, ju], axis=1))
        is_pos = np.fromiter(
            ((int(i), int(j)) in positives for i, j in zip(iu, ju)),
            dtype=bool,
            count=kept,
        )
        scores = -dists
        order = np.argsort(scores, kind="stable")
        ranks = np.empty(kept)
        ranks[order] = np.arange(1, kept + 1)
        # Midranks for ties so that equal scores contribute 0.5.
        sorted_scores = scores[order]
        start = 0
        while start < kept:
            end = start
            while end + 1 < kept and sorted_scores[end + 1] == sorted_scores[start]:
                end += 1
            if end > start:
                ranks[order[start : end + 1]] = (start + 1 + end + 1) / 2.0
            start = end + 1
        rank_sum = ranks[is_pos].sum()
        return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))

    rng = make_rng(seed, "auc-sampling")
    pos_list = np.array(sorted(positives), dtype=np.int64)
    not_negative = positives | excluded
    wins = 0.0
    done = 0
    chunk = 1_000_000
    while done < sample_count:
        take = min(chunk, sample_count - done)
        pos_pairs = pos_list[rng.integers(n_pos, size=take)]
        neg_pairs = _sample_negative_pairs(rng, n, not_negative, take)
        pos_scores = -_pair_distance(embeddings, pos_pairs)
        neg_scores = -_pair_distance(embeddings, neg_pairs)
        wins += float((pos_scores > neg_scores).sum()) + 0.5 * float(
            (pos_scores == neg_scores).sum()
        )
        done += take
    return wins / sample_count


def _sample_negative_pairs(
    rng: np.random.Generator, n: int, positives: set[tuple[int, int]], count: int
) -> np.ndarray:
    out = np.empty((count, 2), dtype=np.int64)
    filled = 0
    while filled < count:
        cand = rng.integers(0, n, size=(count - filled + 16, 2))
        for a, b in cand:
            if a == b:
                continue
            pair = (min(int(a), int(b)), max(int(a), int(b)))
            if pair in positives:
                continue
            out[filled] = pair
            filled += 1
            if filled == count:
                break
    return out


def eval_precision_at_l(
    embeddings: np.ndarray,
    held_out_edges: Sequence[tuple[int, int]],
    l: int,
    exclude_edges: Sequence[tuple[int, int]] = (),
) -> float:
    """Fraction of the L closest non-excluded pairs that are held-out edges."""
    if l < 1:
        raise ConfigError("L must be >= 1")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = embeddings.shape[0]
    held = {(min(i, j), max(i, j)) for i, j in held_out_edges}
    excluded = {(min(i, j), max(i, j)) for i, j in exclude_edges}
    iu, ju = np.triu_indices(n, k=1)
    keep = np.fromiter(
        ((int(i), int(j)) not in excluded for i, j in zip(iu, ju)),
        dtype=bool,
        count=len(iu),
    )
    iu, ju = iu[keep], ju[keep]
    if len(iu) == 0:
        raise DataError("no candidate pairs after exclusion")
    if l > len(iu):
        warnings.warn(f"L={l} exceeds {len(iu)} candidate pairs; clamping")
        l = len(iu)
    dists = _pair_distance(embeddings, np.stack([iu, ju], axis=1))
    order = np.lexsort((ju, iu, dists))[:l]
    hits = sum(1 for idx in order if (int(iu[idx]), int(ju[idx])) in held)
    return hits / l
