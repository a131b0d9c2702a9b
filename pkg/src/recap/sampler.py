"""Value sampling, confidence scoring, subset selection, and guidance.

All randomness is keyed by position through a RandomStream, so a draw for a
given position is the same no matter which other positions are in the batch.
Selection uses the Gumbel-Top-k trick: the k largest C_i / tau2 + g_i pick
the same set as sequential softmax sampling without replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import log_softmax, softmax
from .rng import RandomStream

__all__ = [
    "ConfidenceTable",
    "TargetPlan",
    "sample_values",
    "confidence_scores",
    "gumbel_top_k",
    "select_uniform",
    "partition_targets",
    "cfg_combine",
]


@dataclass(frozen=True)
class ConfidenceTable:
    """Log-probability confidence per currently masked position."""

    positions: np.ndarray  # (m,) int64, ascending
    scores: np.ndarray  # (m,) nats, all <= 0

    def __post_init__(self) -> None:
        if len(self.positions) != len(self.scores):
            raise ValueError("positions and scores disagree in length")
        if np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly ascending")
        if np.any(self.scores > 0):
            raise ValueError("confidence scores are log-probabilities, <= 0")

    def __len__(self) -> int:
        return len(self.positions)

    def score_of(self, positions: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.positions, positions)
        if np.any(idx >= len(self.positions)) or np.any(self.positions[idx] != positions):
            raise KeyError(f"positions not in table: {positions}")
        return self.scores[idx]


@dataclass(frozen=True)
class TargetPlan:
    """A group's target set, ordered and partitioned for its sub-steps."""

    targets: np.ndarray  # S_t ordered by descending confidence
    blocks: tuple[np.ndarray, ...]  # partition, in sub-step order
    tau1: tuple[float, ...] = field(default=())  # per-sub-step, if known

    def __post_init__(self) -> None:
        total = sum(len(b) for b in self.blocks)
        if total != len(self.targets):
            raise ValueError("partition blocks do not cover the target set")


def sample_values(
    logits: np.ndarray,
    tau1: float,
    stream: RandomStream,
    keys: np.ndarray | None = None,
) -> np.ndarray:
    """Sample one token id per row from softmax(logits / tau1).

    `keys` (default row index) key the per-row uniform draw; rows are
    independent, so batch composition cannot change any row's outcome.
    """
    logits = np.atleast_2d(np.asarray(logits))
    probs = softmax(logits.astype(np.float64), temperature=tau1, axis=-1)
    keys = np.arange(len(probs)) if keys is None else np.asarray(keys)
    if len(keys) != len(probs):
        raise ValueError("one key per logit row required")
    u = stream.uniforms_at(keys)
    cdf = np.cumsum(probs, axis=-1)
    values = np.argmax(cdf >= u[:, None], axis=-1)
    return np.minimum(values, logits.shape[-1] - 1).astype(np.int64)


def confidence_scores(
    logits: np.ndarray, positions: np.ndarray, values: np.ndarray
) -> ConfidenceTable:
    """C_i = log p(X_i = value_i), from the temperature-1 softmax."""
    logits = np.atleast_2d(np.asarray(logits))
    positions = np.asarray(positions, dtype=np.int64)
    values = np.asarray(values, dtype=np.int64)
    if not (len(logits) == len(positions) == len(values)):
        raise ValueError("logits, positions, and values disagree in length")
    if np.any(values < 0) or np.any(values >= logits.shape[-1]):
        raise ValueError("sampled value outside the vocabulary")
    logp = log_softmax(logits.astype(np.float64), axis=-1)
    scores = logp[np.arange(len(values)), values]
    order = np.argsort(positions)
    return ConfidenceTable(positions=positions[order], scores=scores[order])


def gumbel_top_k(
    table: ConfidenceTable, tau2: float, k: int, stream: RandomStream
) -> np.ndarray:
    """The k positions with largest C_i / tau2 + g_i (ascending order).

    Equivalent to sampling k positions without replacement with probability
    proportional to softmax(C / tau2).
    """
    if tau2 <= 0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    if not 0 <= k <= len(table):
        raise ValueError(f"k={k} outside [0, {len(table)}]")
    if k == 0:
        return np.array([], dtype=np.int64)
    g = stream.gumbels_at(table.positions)
    keys = table.scores / tau2 + g
    # ties (measure zero, but cheap to pin down) break by ascending position
    order = np.lexsort((table.positions, -keys))
    return np.sort(table.positions[order[:k]])


def select_uniform(masked: np.ndarray, k: int, stream: RandomStream) -> np.ndarray:
    """Uniform without-replacement subset: the k smallest keyed uniforms."""
    masked = np.asarray(masked, dtype=np.int64)
    if not 0 <= k <= len(masked):
        raise ValueError(f"k={k} outside [0, {len(masked)}]")
    if k == 0:
        return np.array([], dtype=np.int64)
    u = stream.uniforms_at(masked)
    order = np.lexsort((masked, u))
    return np.sort(masked[order[:k]])


def partition_targets(
    targets: np.ndarray,
    table: ConfidenceTable,
    sizes: list[int] | tuple[int, ...],
    tau1: tuple[float, ...] = (),
) -> TargetPlan:
    """Sort S_t by descending confidence and split into sub-step blocks."""
    targets = np.asarray(targets, dtype=np.int64)
    if sum(sizes) != len(targets):
        raise ValueError(f"sizes {list(sizes)} do not sum to |S_t| = {len(targets)}")
    scores = table.score_of(targets)
    order = np.lexsort((targets, -scores))
    ordered = targets[order]
    blocks = []
    start = 0
    for size in sizes:
        blocks.append(ordered[start : start + size])
        start += size
    return TargetPlan(targets=ordered, blocks=tuple(blocks), tau1=tuple(tau1))


def cfg_combine(
    cond_logits: np.ndarray, uncond_logits: np.ndarray, scale: float
) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    cond_logits = np.asarray(cond_logits)
    uncond_logits = np.asarray(uncond_logits)
    if cond_logits.shape != uncond_logits.shape:
        raise ValueError(
            f"shape mismatch: {cond_logits.shape} vs {uncond_logits.shape}"
        )
    if scale < 0:
        raise ValueError("guidance scale must be >= 0")
    return uncond_logits + scale * (cond_logits - uncond_logits)
