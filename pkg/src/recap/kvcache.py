"""Cached key/value features for grouped decoding.

A full evaluation caches per-layer K/V rows for every position outside the
group's target set S_t. Targets not yet decoded keep their stale (mask-input)
rows from the full pass; once a sub-step commits values, the recomputed rows
replace the stale ones so later sub-steps see the new context.

Slot id convention: token positions are 0..N-1; the encoder-decoder condition
slot uses id -1 in both stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .grid import TokenGrid
    from .model import ForwardRecord, ModelConfig, PartialResult

__all__ = [
    "LayerKVCache",
    "DecodingCache",
    "build_cache",
    "assemble_attention_context",
    "CacheMismatch",
]

COND_SLOT = -1


class CacheMismatch(ValueError):
    """A partial forward was issued against a cache it does not belong to."""


@dataclass
class LayerKVCache:
    """K/V rows for one layer of one stack, tagged with their slot ids."""

    layer_index: int
    position_ids: np.ndarray  # (m,) int64
    k: np.ndarray  # (m, d)
    v: np.ndarray  # (m, d)

    def __post_init__(self) -> None:
        assert len(self.position_ids) == len(self.k) == len(self.v)
        assert len(np.unique(self.position_ids)) == len(self.position_ids)


def assemble_attention_context(
    cache: LayerKVCache,
    fresh_k: np.ndarray,
    fresh_v: np.ndarray,
    fresh_ids: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate fresh-then-cached K/V rows.

    Returns (k_ctx, v_ctx, index_map) where index_map[r] is the slot id of
    context row r. Duplicate slot ids across fresh and cached are an error.
    """
    fresh_ids = np.asarray(fresh_ids, dtype=np.int64)
    if len(fresh_ids) != len(fresh_k) or len(fresh_ids) != len(fresh_v):
        raise ValueError("fresh ids and rows disagree in length")
    dup = np.intersect1d(fresh_ids, cache.position_ids)
    if dup.size:
        raise ValueError(f"duplicate position ids across fresh and cached: {dup.tolist()}")
    if len(fresh_ids) == 0:
        return cache.k, cache.v, cache.position_ids
    k_ctx = np.concatenate([fresh_k, cache.k], axis=0)
    v_ctx = np.concatenate([fresh_v, cache.v], axis=0)
    index_map = np.concatenate([fresh_ids, cache.position_ids])
    return k_ctx, v_ctx, index_map


@dataclass
class _StackStore:
    """Working K/V arrays for one stack, indexable by slot id."""

    slot_ids: np.ndarray  # (m,) int64
    k: np.ndarray  # (layers, m, d)
    v: np.ndarray  # (layers, m, d)

    def row_of(self, ids: np.ndarray) -> np.ndarray:
        # map slot ids -> row indices in the working arrays
        order = np.argsort(self.slot_ids, kind="stable")
        pos = np.searchsorted(self.slot_ids[order], ids)
        if np.any(pos >= len(order)) or np.any(self.slot_ids[order][pos] != ids):
            missing = ids[(pos >= len(order)) | (self.slot_ids[order][np.minimum(pos, len(order) - 1)] != ids)]
            raise CacheMismatch(f"slot ids not in cache: {np.asarray(missing).tolist()}")
        return order[pos]


@dataclass
class DecodingCache:
    """All cached state for one group of one in-flight sequence."""

    config: "ModelConfig"
    condition: int
    target_ids: np.ndarray  # sorted S_t
    entry_grid: "TokenGrid"  # reference state the cached rows approximate
    fingerprint: bytes
    dec: _StackStore
    enc: _StackStore | None = None
    replaced: set[int] = field(default_factory=set)

    # views ----------------------------------------------------------------

    def layer_complement(self, layer: int) -> LayerKVCache:
        """The formal per-layer cache: rows at every non-target slot."""
        keep = ~np.isin(self.dec.slot_ids, self.target_ids)
        return LayerKVCache(
            layer_index=layer,
            position_ids=self.dec.slot_ids[keep],
            k=self.dec.k[layer][keep],
            v=self.dec.v[layer][keep],
        )

    def dec_context(self, layer: int, exclude_ids: np.ndarray) -> LayerKVCache:
        """Cached rows serving a partial pass: everything except `exclude_ids`.

        Not-yet-decoded targets contribute their stale full-pass rows;
        already-replaced targets contribute their refreshed rows.
        """
        keep = ~np.isin(self.dec.slot_ids, exclude_ids)
        return LayerKVCache(
            layer_index=layer,
            position_ids=self.dec.slot_ids[keep],
            k=self.dec.k[layer][keep],
            v=self.dec.v[layer][keep],
        )

    def enc_context(self, layer: int) -> LayerKVCache:
        assert self.enc is not None, "decoder-only cache has no encoder stack"
        return LayerKVCache(
            layer_index=layer,
            position_ids=self.enc.slot_ids,
            k=self.enc.k[layer],
            v=self.enc.v[layer],
        )

    # updates ---------------------------------------------------------------

    def apply_partial(self, result: "PartialResult", reference_grid: "TokenGrid") -> None:
        """Replace stale rows with the partial pass's fresh rows.

        `reference_grid` is the grid the partial pass ran on; it becomes the
        state this cache claims as its base for the next sub-step.
        """
        rows = self.dec.row_of(result.targets)
        for layer in range(self.dec.k.shape[0]):
            self.dec.k[layer][rows] = result.dec_k[layer]
            self.dec.v[layer][rows] = result.dec_v[layer]
        self.replaced.update(int(p) for p in result.targets)
        if result.enc_new_ids is not None and len(result.enc_new_ids):
            assert self.enc is not None
            self.enc = _StackStore(
                slot_ids=np.concatenate([self.enc.slot_ids, result.enc_new_ids]),
                k=np.concatenate([self.enc.k, result.enc_k], axis=1),
                v=np.concatenate([self.enc.v, result.enc_v], axis=1),
            )
        self.entry_grid = reference_grid.copy()
        self.fingerprint = self.entry_grid.fingerprint()


def build_cache(record: "ForwardRecord", target_set: np.ndarray) -> DecodingCache:
    """Cache a full pass's K/V for the complement of `target_set`.

    The working store keeps rows for all slots (stale rows at targets are
    reused by design until replaced); the formal complement view is exposed
    per layer via `layer_complement`.
    """
    targets = np.unique(np.asarray(target_set, dtype=np.int64))
    n = len(record.grid)
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise ValueError(f"target positions outside [0, {n})")
    dec = _StackStore(
        slot_ids=record.dec_slot_ids.copy(),
        k=record.dec_k.copy(),
        v=record.dec_v.copy(),
    )
    enc = None
    if record.enc_slot_ids is not None:
        enc = _StackStore(
            slot_ids=record.enc_slot_ids.copy(),
            k=record.enc_k.copy(),
            v=record.enc_v.copy(),
        )
    return DecodingCache(
        config=record.config,
        condition=record.condition,
        target_ids=targets,
        entry_grid=record.grid.copy(),
        fingerprint=record.grid.fingerprint(),
        dec=dec,
        enc=enc,
    )
