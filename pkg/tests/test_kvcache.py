"""Tests for K/V cache construction and context assembly."""

from __future__ import annotations

import numpy as np
import pytest

from recap.grid import TokenGrid
from recap.kvcache import (
    CacheMismatch,
    LayerKVCache,
    assemble_attention_context,
    build_cache,
)
from recap.model import ModelConfig, forward_full, init_params
from recap.rng import RandomStream


def _record(n=16, layers=2, decoded=()):
    cfg = ModelConfig(seq_len=n, embed_dim=16, heads=2, layers=layers, vocab=7)
    params = init_params(cfg, RandomStream(3))
    grid = TokenGrid.all_masked(n)
    if len(decoded):
        grid.commit(np.asarray(decoded), np.zeros(len(decoded), dtype=np.int64))
    return forward_full(params, grid), grid


def test_complement_counting():
    rec, grid = _record(n=16)
    cache = build_cache(rec, np.arange(4))
    for layer in range(2):
        view = cache.layer_complement(layer)
        assert len(view.position_ids) == 12
        assert view.k.shape == (12, 16)


def test_empty_target_set_covers_all_positions():
    rec, _ = _record(n=16)
    cache = build_cache(rec, np.array([], dtype=np.int64))
    assert len(cache.layer_complement(0).position_ids) == 16


def test_all_targets_gives_empty_complement():
    rec, _ = _record(n=16)
    cache = build_cache(rec, np.arange(16))
    view = cache.layer_complement(1)
    assert len(view.position_ids) == 0
    assert view.k.shape == (0, 16)


def test_target_out_of_range():
    rec, _ = _record(n=16)
    with pytest.raises(ValueError, match="outside"):
        build_cache(rec, np.array([16]))


@pytest.mark.parametrize("targets", [np.arange(4), np.array([0, 5, 9, 15])])
def test_complement_partition(targets):
    rec, _ = _record(n=16)
    cache = build_cache(rec, targets)
    for layer in range(2):
        ids = cache.layer_complement(layer).position_ids
        assert len(np.intersect1d(ids, targets)) == 0
        assert np.array_equal(np.sort(np.concatenate([ids, targets])), np.arange(16))


def test_memory_bound():
    rec, _ = _record(n=16)
    cache = build_cache(rec, np.arange(4))
    for layer in range(2):
        view = cache.layer_complement(layer)
        assert view.k.size + view.v.size <= 16 * 16 * 2


def test_stale_target_rows_are_the_full_pass_rows():
    rec, _ = _record(n=16, decoded=[0, 1])
    targets = np.array([4, 5, 6, 7])
    cache = build_cache(rec, targets)
    rows = cache.dec.row_of(targets)
    for layer in range(2):
        assert np.array_equal(cache.dec.k[layer][rows], rec.dec_k[layer][targets])
        assert np.array_equal(cache.dec.v[layer][rows], rec.dec_v[layer][targets])
    assert cache.fingerprint == rec.grid.fingerprint()


def test_assemble_empty_fresh_is_identity():
    layer = LayerKVCache(
        layer_index=0,
        position_ids=np.array([2, 5, 7]),
        k=np.arange(12.0).reshape(3, 4),
        v=np.arange(12.0).reshape(3, 4) + 100,
    )
    empty = np.zeros((0, 4))
    k, v, ids = assemble_attention_context(layer, empty, empty, np.array([], dtype=np.int64))
    assert np.array_equal(k, layer.k)
    assert np.array_equal(v, layer.v)
    assert np.array_equal(ids, layer.position_ids)


def test_assemble_fresh_then_cached_order():
    layer = LayerKVCache(
        layer_index=0,
        position_ids=np.array([2, 5]),
        k=np.ones((2, 4)),
        v=np.ones((2, 4)),
    )
    fresh_k = np.full((1, 4), 7.0)
    k, v, ids = assemble_attention_context(layer, fresh_k, fresh_k, np.array([0]))
    assert np.array_equal(ids, np.array([0, 2, 5]))
    assert np.array_equal(k[0], fresh_k[0])
    assert np.array_equal(k[1:], layer.k)


def test_assemble_duplicate_position_is_error():
    layer = LayerKVCache(
        layer_index=0,
        position_ids=np.array([2, 5]),
        k=np.ones((2, 4)),
        v=np.ones((2, 4)),
    )
    fresh = np.zeros((1, 4))
    with pytest.raises(ValueError, match="duplicate"):
        assemble_attention_context(layer, fresh, fresh, np.array([5]))


def test_row_lookup_missing_slot():
    rec, _ = _record(n=16)
    cache = build_cache(rec, np.arange(4))
    with pytest.raises(CacheMismatch, match="not in cache"):
        cache.dec.row_of(np.array([99]))
