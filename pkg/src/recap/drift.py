"""Context-representation drift under grouped decoding.

The staleness question behind grouped decoding: once some masked positions
get committed without a fresh full pass, how far do the *context* token
representations move? This module measures that directly. For one sample it
freezes K visible context positions, runs a full pass, then commits m
additional positions (prefixes of one fixed random order, so the update sets
are nested) and runs another full pass. The probe reports, per layer, the
cosine similarity between the mean-pooled block-input activations at the
context positions before and after the updates. m = 0 reruns the identical
grid, so its similarity is exactly 1.0 by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .grid import TokenGrid
from .model import ModelParams, forward_full
from .rng import RandomStream
from .sampler import sample_values

__all__ = ["DriftCurve", "drift_probe", "drift_curve", "write_drift_csv"]

DRIFT_CSV_HEADER = ["K", "m", "mean_similarity", "layer_std", "n_samples"]


@dataclass(frozen=True)
class DriftCurve:
    """Similarity-vs-updates curve for one context size K.

    per_layer holds the sample-mean similarity for every decoder layer and
    update count, shape (layers, len(update_counts)). mean_similarity and
    layer_std collapse the layer axis.
    """

    K: int
    update_counts: tuple[int, ...]
    mean_similarity: tuple[float, ...]
    layer_std: tuple[float, ...]
    n_samples: int
    per_layer: np.ndarray

    def as_rows(self) -> list[dict[str, object]]:
        return [
            {
                "K": self.K,
                "m": m,
                "mean_similarity": self.mean_similarity[i],
                "layer_std": self.layer_std[i],
                "n_samples": self.n_samples,
            }
            for i, m in enumerate(self.update_counts)
        ]


def _check_probe_args(params: ModelParams, K: int, update_counts) -> None:
    n = params.config.seq_len
    if not 1 <= K < n:
        raise ValueError(f"K must be in [1, {n - 1}], got {K}")
    counts = list(update_counts)
    if not counts:
        raise ValueError("update_counts is empty")
    if any(m < 0 for m in counts):
        raise ValueError("update_counts must be >= 0")
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ValueError("update_counts must be strictly increasing")
    if counts[-1] > n - K:
        raise ValueError(
            f"cannot commit {counts[-1]} updates with K={K} context positions on {n} tokens"
        )


def _context_taps(record, positions: np.ndarray) -> np.ndarray:
    """Mean-pooled pre-attention activations at `positions`, per layer."""
    return record.block_inputs[:, positions, :].mean(axis=1)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    out = num / np.maximum(den, np.finfo(np.float64).tiny)
    # identical activations mean zero drift; report 1.0 free of sqrt roundoff
    out[np.all(a == b, axis=1)] = 1.0
    return out


def drift_probe(
    params: ModelParams,
    tokens: np.ndarray,
    condition: int | None,
    K: int,
    update_counts,
    stream: RandomStream,
    fill: str = "truth",
) -> np.ndarray:
    """Per-layer context similarity after m committed updates, one sample.

    tokens is one ground-truth grid, shape (N,) of ids or (N, token_dim) of
    latents. Returns an array of shape (layers, len(update_counts)). With
    fill="truth" the committed values come from `tokens`; fill="sampled"
    draws them from the baseline pass instead (discrete grids only).
    """
    _check_probe_args(params, K, update_counts)
    if fill not in ("truth", "sampled"):
        raise ValueError(f"fill must be 'truth' or 'sampled', got {fill!r}")
    cfg = params.config
    n = cfg.seq_len
    continuous = cfg.token_mode == "continuous"
    if fill == "sampled" and continuous:
        raise ValueError("sampled fill is only available for discrete grids")
    if tokens.shape[0] != n:
        raise ValueError(f"sample has {tokens.shape[0]} tokens, model expects {n}")

    order = np.argsort(stream.child("layout").uniforms_at(np.arange(n)), kind="stable")
    context = np.sort(order[:K])
    hidden = order[K:]

    grid = TokenGrid.all_masked(
        n, condition=condition, token_dim=cfg.token_dim if continuous else None,
        dtype=tokens.dtype if continuous else np.float32,
    )
    grid.commit(context, tokens[context])
    baseline = forward_full(params, grid)
    taps0 = _context_taps(baseline, context)

    if fill == "truth":
        fill_values = tokens
    else:
        drawn = sample_values(
            baseline.outputs[hidden], 1.0, stream.child("fill"), keys=hidden
        )
        fill_values = np.zeros(n, dtype=np.int64)
        fill_values[hidden] = drawn

    counts = list(update_counts)
    sims = np.empty((taps0.shape[0], len(counts)), dtype=np.float64)
    for i, m in enumerate(counts):
        probe_grid = grid.copy()
        if m > 0:
            updated = np.sort(hidden[:m])
            probe_grid.commit(updated, fill_values[updated], step=1)
        record = forward_full(params, probe_grid)
        sims[:, i] = _cosine_rows(taps0, _context_taps(record, context))
    return sims


def drift_curve(
    params: ModelParams,
    dataset: Dataset,
    K: int,
    update_counts,
    n_samples: int,
    stream: RandomStream,
    fill: str = "truth",
) -> DriftCurve:
    """Average drift_probe over `n_samples` grids drawn from `dataset`."""
    _check_probe_args(params, K, update_counts)
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    source = dataset.vecs if params.config.token_mode == "continuous" else dataset.tokens
    if source is None:
        raise ValueError("continuous drift needs a dataset with token vectors")

    acc = None
    for i in range(n_samples):
        row = i % len(dataset)
        sims = drift_probe(
            params,
            source[row],
            int(dataset.classes[row]),
            K,
            update_counts,
            stream.child("sample", i),
            fill=fill,
        )
        acc = sims if acc is None else acc + sims
    per_layer = acc / n_samples
    counts = tuple(int(m) for m in update_counts)
    return DriftCurve(
        K=K,
        update_counts=counts,
        mean_similarity=tuple(float(x) for x in per_layer.mean(axis=0)),
        layer_std=tuple(float(x) for x in per_layer.std(axis=0)),
        n_samples=n_samples,
        per_layer=per_layer,
    )


def write_drift_csv(curves, path) -> None:
    """Write one row per (K, m) pair with the header K,m,mean_similarity,layer_std,n_samples."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=DRIFT_CSV_HEADER)
        writer.writeheader()
        for curve in curves:
            for row in curve.as_rows():
                writer.writerow(row)
