"""Attribute distribution protection and pairwise additive masking.

Nothing in this module sees node IDs or raw attribute tuples; histograms
arrive pre-binned and leave as protected count vectors. Masking works on
fixed-point integers with wrapping uint64 arithmetic so that the sum over
all clients cancels the masks exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rng import derive_seed, make_rng

#: Denominator of the fixed-point encoding used for masked uploads.
FIXED_POINT_SCALE = 1 << 20


class Mechanism(str, Enum):
    NONE = "none"
    K_ANONYMITY = "k_anonymity"
    L_DIVERSITY = "l_diversity"
    LAPLACE = "laplace"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class PrivacyConfig:
    mechanism: Mechanism = Mechanism.NONE
    k: int = 2
    l: int = 2
    epsilon: float = 1.0
    sensitivity: float = 1.0
    rng_seed: int = 0
    # Attribute whose value diversity gates release under l_diversity.
    sensitive_attribute: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mechanism", Mechanism(self.mechanism))
        if self.mechanism is Mechanism.K_ANONYMITY and self.k < 2:
            raise ConfigError("k must be >= 2 for k_anonymity")
        if self.mechanism is Mechanism.L_DIVERSITY and self.l < 2:
            raise ConfigError("l must be >= 2 for l_diversity")
        if self.mechanism in (Mechanism.LAPLACE, Mechanism.EXPONENTIAL) and self.epsilon <= 0:
            raise ConfigError("epsilon must be positive for differential privacy")
        if self.sensitivity <= 0:
            raise ConfigError("sensitivity must be positive")


@dataclass
class SuppressionReport:
    mechanism: Mechanism
    suppressed_bins: list[int] = field(default_factory=list)
    suppressed_mass: float = 0.0


def protect_histogram(
    counts: Sequence[int] | np.ndarray,
    cfg: PrivacyConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, SuppressionReport]:
    """Apply the configured protection to a histogram of nonnegative counts.

    k_anonymity zeroes every bin with 0 < count < k. laplace adds independent
    Laplace(sensitivity/epsilon) noise and clamps at 0. exponential releases
    only an indicator of the (privately selected) modal bin. l_diversity is
    record-based and must go through :func:`l_diversify` instead.
    """
    arr = np.asarray(counts, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError("histogram must be one-dimensional")
    if (arr < 0).any():
        raise DataError("histogram counts must be nonnegative")
    report = SuppressionReport(mechanism=cfg.mechanism)

    if cfg.mechanism is Mechanism.NONE:
        return arr.copy(), report

    if cfg.mechanism is Mechanism.K_ANONYMITY:
        out = arr.copy()
        small = (out > 0) & (out < cfg.k)
        report.suppressed_bins = [int(i) for i in np.flatnonzero(small)]
        report.suppressed_mass = float(out[small].sum())
        out[small] = 0.0
        return out, report

    if rng is None:
        rng = make_rng(cfg.rng_seed, "adpm")

    if cfg.mechanism is Mechanism.LAPLACE:
        scale = cfg.sensitivity / cfg.epsilon
        noisy = arr + rng.laplace(0.0, scale, size=arr.shape)
        return np.maximum(noisy, 0.0), report

    if cfg.mechanism is Mechanism.EXPONENTIAL:
        selected = exponential_select(
            list(range(len(arr))), arr.tolist(), cfg.sensitivity, cfg.epsilon, rng
        )
        out = np.zeros_like(arr)
        out[selected] = 1.0
        report.suppressed_mass = float(arr.sum())
        report.suppressed_bins = [int(i) for i in range(len(arr)) if i != selected]
        return out, report

    raise ConfigError(
        "l_diversity gates release per sensitive-value group; apply l_diversify"
    )


def l_diversify(
    records: Iterable[tuple[object, object]], l: int
) -> list[tuple[object, int]]:
    """Release (bin, count) for groups holding >= l distinct sensitive values."""
    if l < 2:
        raise ConfigError("l must be >= 2")
    groups: dict[object, list[object]] = {}
    for bin_key, sensitive in records:
        groups.setdefault(bin_key, []).append(sensitive)
    released = []
    for bin_key in sorted(groups, key=repr):
        values = groups[bin_key]
        if len(set(values)) >= l:
            released.append((bin_key, len(values)))
    return released


def exponential_select(
    candidates: Sequence[int],
    utility: Sequence[float],
    sensitivity: float,
    epsilon: float,
    rng: np.random.Generator,
) -> int:
    """Sample a candidate with probability proportional to exp(eps*u/(2*sens))."""
    if len(candidates) == 0:
        raise DataError("no candidates")
    if len(candidates) != len(utility):
        raise DataError("candidates and utilities differ in length")
    scores = np.asarray(utility, dtype=np.float64) * (epsilon / (2.0 * sensitivity))
    scores -= scores.max()
    weights = np.exp(scores)
    probs = weights / weights.sum()
    return int(candidates[rng.choice(len(candidates), p=probs)])


# ---------------------------------------------------------------------------
# Pairwise additive masking over fixed point
# ---------------------------------------------------------------------------


def fixed_point_encode(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Round to the fixed-point grid and reinterpret as wrapping uint64."""
    scaled = np.rint(np.asarray(values, dtype=np.float64) * FIXED_POINT_SCALE)
    if not np.isfinite(scaled).all():
        raise DataError("cannot encode non-finite values")
    return scaled.astype(np.int64).view(np.uint64)


def fixed_point_decode(total: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fixed_point_encode` after summation."""
    return np.asarray(total, dtype=np.uint64).view(np.int64).astype(np.float64) / FIXED_POINT_SCALE


def make_mask_seeds(client_ids: Sequence[str], run_seed: int) -> dict[str, int]:
    """Per-pair shared seeds, keyed "i|j" with i < j lexicographically."""
    seeds = {}
    ordered = sorted(client_ids)
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            i, j = ordered[a], ordered[b]
            seeds[f"{i}|{j}"] = derive_seed(run_seed, "pair-mask", i, j)
    return seeds


def _pair_mask(seed: int, round_no: int, length: int) -> np.ndarray:
    rng = make_rng(seed, "round", round_no)
    return rng.integers(0, 2**64, size=length, dtype=np.uint64)


def mask(
    vector: Sequence[float] | np.ndarray,
    self_id: str,
    all_ids: Sequence[str],
    round_no: int,
    seed_matrix: Mapping[str, int],
) -> np.ndarray:
    """Fixed-point encode then add all pairwise masks for this client.

    For the pair (i, j) with i < j, client i adds the mask and client j
    subtracts it, so the masks cancel exactly in the aggregate. A single
    client has no peers and uploads the bare fixed-point encoding.
    """
    if self_id not in all_ids:
        raise ConfigError(f"client {self_id!r} not among participants")
    encoded = fixed_point_encode(vector)
    length = len(encoded)
    with np.errstate(over="ignore"):
        for other in sorted(all_ids):
            if other == self_id:
                continue
            lo, hi = sorted((self_id, other))
            pair_seed = seed_matrix.get(f"{lo}|{hi}")
            if pair_seed is None:
                raise ConfigError(f"no mask seed for pair ({lo}, {hi})")
            m = _pair_mask(pair_seed, round_no, length)
            if self_id == lo:
                encoded = encoded + m
            else:
                encoded = encoded - m
    return encoded


def unmask_sum(masked_vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Exact fixed-point sum of the masked uploads (masks cancel)."""
    if not masked_vectors:
        raise DataError("no uploads to aggregate")
    total = np.zeros_like(np.asarray(masked_vectors[0], dtype=np.uint64))
    with np.errstate(over="ignore"):
        for vec in masked_vectors:
            arr = np.asarray(vec, dtype=np.uint64)
            if arr.shape != total.shape:
                raise DataError("masked uploads differ in shape")
            total = total + arr
    return fixed_point_decode(total)
