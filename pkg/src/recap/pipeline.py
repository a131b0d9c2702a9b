"""End-to-end decoding (baseline and grouped) and toy training.

Decoding draws every random quantity from keyed streams: the confidence pass
for step s keys ("conf_value", s, position), selection keys ("choice", s,
position), committed values ("value", s, position), and diffusion noise
("diff", s, ...). Because draws are keyed by global sub-step index and
position rather than call order, grouped decoding with zero local sub-steps
replays the baseline draw-for-draw and produces a bit-identical grid.

Each grouped step runs one full forward, caches K/V, commits its first block
from those outputs, then runs one partial forward per local sub-step. The
partial pass targets the union of the previous block (so its freshly
committed values enter the cache) and the current block (whose outputs are
sliced for sampling); the ledger therefore counts exactly one local pass per
local sub-step, with n_hat = |union|.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .costs import CostLedger
from .data import Dataset
from .diffusion import sample_tokens
from .grads import continuous_loss_and_grads, discrete_loss_and_grads
from .grid import TokenGrid
from .kvcache import DecodingCache, build_cache
from .model import ForwardRecord, ModelParams, forward_full, forward_partial, null_condition_id
from .rng import RandomStream
from .sampler import (
    ConfidenceTable,
    cfg_combine,
    confidence_scores,
    gumbel_top_k,
    partition_targets,
    sample_values,
    select_uniform,
)
from .schedule import GroupedSchedule, StepSchedule

__all__ = [
    "SamplerConfig",
    "TrainConfig",
    "decode_baseline",
    "decode_recap",
    "train_epoch",
    "train_model",
]

_TINY = float(2.0**-53)


@dataclass(frozen=True)
class SamplerConfig:
    """Decoding knobs shared by both decoders.

    cfg_scale None disables classifier-free guidance; any other value runs a
    conditional and a null-condition pass per forward and combines outputs.
    resample_locals False is the ablation where local sub-steps re-draw from
    the group's full-pass outputs instead of running partial forwards.
    full_steps/local_steps set the denoising step counts used after full and
    partial passes in continuous mode.
    """

    selector: str = "confidence"
    cfg_scale: float | None = None
    resample_locals: bool = True
    full_steps: int = 64
    local_steps: int = 64

    def __post_init__(self) -> None:
        if self.selector not in ("confidence", "uniform"):
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.cfg_scale is not None and self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.full_steps < 1 or self.local_steps < 1:
            raise ValueError("diffusion step counts must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    """Momentum-SGD settings; grad_clip caps the global gradient L2 norm.

    Clipping matters even on toy tasks: once the network sharpens, a single
    batch of label-dropped examples can produce a gradient large enough to
    throw the weights into a saturated region that training never leaves.
    """

    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    label_dropout: float = 0.1
    mask_ratio_floor: float = 0.2
    grad_clip: float | None = 1.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 <= self.label_dropout < 1.0:
            raise ValueError(f"label_dropout must be in [0, 1), got {self.label_dropout}")
        if not 0.0 < self.mask_ratio_floor <= 1.0:
            raise ValueError("mask_ratio_floor must be in (0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")


# decoding --------------------------------------------------------------------


def _validate_decode(params: ModelParams, num_tokens: int, scfg: SamplerConfig, condition):
    cfg = params.config
    if num_tokens != cfg.seq_len:
        raise ValueError(
            f"schedule decodes {num_tokens} tokens but the model expects {cfg.seq_len}"
        )
    if condition is not None and not 0 <= int(condition) < cfg.num_conditions:
        raise ValueError(f"condition {condition} outside [0, {cfg.num_conditions})")
    if scfg.cfg_scale is not None and condition is None:
        raise ValueError("classifier-free guidance needs an explicit condition")
    if cfg.token_mode == "continuous":
        if params.diffusion is None:
            raise ValueError("continuous decoding needs a diffusion head")
        if scfg.selector == "confidence":
            raise ValueError("confidence selection is undefined for continuous tokens")


def _fresh_grid(params: ModelParams, condition) -> TokenGrid:
    cfg = params.config
    if cfg.token_mode == "discrete":
        return TokenGrid.all_masked(cfg.seq_len, condition=condition)
    return TokenGrid.all_masked(
        cfg.seq_len, condition=condition, token_dim=cfg.token_dim, dtype=params.dtype
    )


def _full_pass(
    params: ModelParams, grid: TokenGrid, scfg: SamplerConfig, ledger: CostLedger
) -> tuple[ForwardRecord, ForwardRecord | None, np.ndarray]:
    t0 = time.perf_counter_ns()
    record = forward_full(params, grid)
    ledger.add_full_fe(params.config, time.perf_counter_ns() - t0)
    if scfg.cfg_scale is None:
        return record, None, record.outputs
    t0 = time.perf_counter_ns()
    record_u = forward_full(params, grid, condition=null_condition_id(params.config))
    ledger.add_full_fe(params.config, time.perf_counter_ns() - t0)
    return record, record_u, cfg_combine(record.outputs, record_u.outputs, scfg.cfg_scale)


def _partial_pass(
    params: ModelParams,
    grid: TokenGrid,
    union: np.ndarray,
    cache: DecodingCache,
    cache_u: DecodingCache | None,
    scfg: SamplerConfig,
    ledger: CostLedger,
):
    t0 = time.perf_counter_ns()
    result = forward_partial(params, grid, union, cache)
    ledger.add_local_fe(params.config, len(union), time.perf_counter_ns() - t0)
    if cache_u is None:
        return result, None, result.outputs
    t0 = time.perf_counter_ns()
    result_u = forward_partial(params, grid, union, cache_u)
    ledger.add_local_fe(params.config, len(union), time.perf_counter_ns() - t0)
    return result, result_u, cfg_combine(result.outputs, result_u.outputs, scfg.cfg_scale)


def _draw_values(
    params: ModelParams,
    outputs_rows: np.ndarray,
    positions: np.ndarray,
    tau1: float,
    sub_index: int,
    scfg: SamplerConfig,
    stream: RandomStream,
    ledger: CostLedger,
    after_full: bool,
) -> np.ndarray:
    if params.config.token_mode == "discrete":
        return sample_values(
            outputs_rows, tau1, stream.child("value", sub_index), keys=positions
        )
    steps = scfg.full_steps if after_full else scfg.local_steps
    steps = min(steps, params.diffusion.t_d)
    t0 = time.perf_counter_ns()
    vals = sample_tokens(
        params.arrays,
        params.diffusion,
        outputs_rows,
        steps,
        stream.child("diff", sub_index),
        keys=positions,
    )
    ledger.add_diffusion(
        params.diffusion,
        tokens=len(positions),
        steps=steps,
        after_full=after_full,
        elapsed_ns=time.perf_counter_ns() - t0,
    )
    return vals.astype(params.dtype)


def _select(
    scfg: SamplerConfig,
    table: ConfidenceTable | None,
    masked: np.ndarray,
    k: int,
    tau2: float,
    s: int,
    stream: RandomStream,
) -> np.ndarray:
    if scfg.selector == "confidence":
        return gumbel_top_k(table, tau2, k, stream.child("choice", s))
    return select_uniform(masked, k, stream.child("choice", s))


def _confidence_table(
    params: ModelParams,
    out_masked: np.ndarray,
    masked: np.ndarray,
    s: int,
    stream: RandomStream,
) -> ConfidenceTable:
    """Confidence pass at temperature 1; continuous mode gets a keyed random
    ordering instead (log-uniform scores), since token probabilities are
    undefined there."""
    if params.config.token_mode == "discrete":
        conf_values = sample_values(
            out_masked, 1.0, stream.child("conf_value", s), keys=masked
        )
        return confidence_scores(out_masked, masked, conf_values)
    u = np.maximum(stream.child("order", s).uniforms_at(masked), _TINY)
    return ConfidenceTable(positions=masked, scores=np.log(u))


def decode_baseline(
    params: ModelParams,
    schedule: StepSchedule,
    scfg: SamplerConfig,
    condition: int | None,
    stream: RandomStream,
) -> tuple[TokenGrid, CostLedger]:
    """Full-forward-per-step decoding from an all-masked grid."""
    _validate_decode(params, schedule.num_tokens, scfg, condition)
    grid = _fresh_grid(params, condition)
    ledger = CostLedger()
    for s in range(1, schedule.total_steps + 1):
        k = schedule.decode_counts[s - 1]
        if k == 0:
            continue
        _, _, outputs = _full_pass(params, grid, scfg, ledger)
        masked = np.flatnonzero(grid.mask)
        out_m = outputs[masked]
        table = _confidence_table(params, out_m, masked, s, stream)
        chosen = _select(scfg, table, masked, k, schedule.tau2[s - 1], s, stream)
        rows = np.searchsorted(masked, chosen)
        vals = _draw_values(
            params, out_m[rows], chosen, schedule.tau1[s - 1], s, scfg, stream,
            ledger, after_full=True,
        )
        grid.commit(chosen, vals, step=s)
    assert not grid.mask.any(), "schedule left masked positions"
    return grid, ledger


def decode_recap(
    params: ModelParams,
    gsched: GroupedSchedule,
    scfg: SamplerConfig,
    condition: int | None,
    stream: RandomStream,
) -> tuple[TokenGrid, CostLedger]:
    """Grouped decoding: one full pass per group, partial passes in between."""
    _validate_decode(params, gsched.num_tokens, scfg, condition)
    grid = _fresh_grid(params, condition)
    ledger = CostLedger()
    for group in gsched.groups():
        sub0 = group[0]
        s0 = sub0.index
        k_t = sum(sub.decode_count for sub in group)
        if k_t == 0:
            continue
        record, record_u, outputs = _full_pass(params, grid, scfg, ledger)
        masked = np.flatnonzero(grid.mask)
        out_m = outputs[masked]
        table = _confidence_table(params, out_m, masked, s0, stream)
        chosen = _select(scfg, table, masked, k_t, sub0.tau2, s0, stream)
        plan = partition_targets(chosen, table, [sub.decode_count for sub in group])
        blocks = [np.sort(b) for b in plan.blocks]

        block0 = blocks[0]
        if len(block0):
            rows = np.searchsorted(masked, block0)
            vals = _draw_values(
                params, out_m[rows], block0, sub0.tau1, s0, scfg, stream,
                ledger, after_full=True,
            )
            grid.commit(block0, vals, step=s0)

        locals_ = [(sub, blk) for sub, blk in zip(group[1:], blocks[1:]) if len(blk)]
        if not locals_:
            continue
        if scfg.resample_locals:
            cache = build_cache(record, chosen)
            cache_u = build_cache(record_u, chosen) if record_u is not None else None
            prev = block0
            for sub, blk in locals_:
                union = np.union1d(prev, blk)
                result, result_u, pouts = _partial_pass(
                    params, grid, union, cache, cache_u, scfg, ledger
                )
                pos = np.searchsorted(result.targets, blk)
                vals = _draw_values(
                    params, pouts[pos], blk, sub.tau1, sub.index, scfg, stream,
                    ledger, after_full=False,
                )
                grid.commit(blk, vals, step=sub.index)
                cache.apply_partial(result, grid)
                if cache_u is not None:
                    cache_u.apply_partial(result_u, grid)
                prev = blk
        else:
            # ablation: staged commits re-drawn from the group's full outputs
            for sub, blk in locals_:
                rows = np.searchsorted(masked, blk)
                vals = _draw_values(
                    params, out_m[rows], blk, sub.tau1, sub.index, scfg, stream,
                    ledger, after_full=True,
                )
                grid.commit(blk, vals, step=sub.index)
    assert not grid.mask.any(), "schedule left masked positions"
    return grid, ledger


# training --------------------------------------------------------------------


def _check_dataset(params: ModelParams, dataset: Dataset) -> None:
    cfg = params.config
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.spec.seq_len != cfg.seq_len:
        raise ValueError(
            f"dataset grids have {dataset.spec.seq_len} tokens, model expects {cfg.seq_len}"
        )
    if cfg.token_mode == "discrete":
        if dataset.spec.vocab != cfg.vocab:
            raise ValueError(
                f"dataset vocab {dataset.spec.vocab} does not match model vocab {cfg.vocab}"
            )
    elif dataset.vecs is None:
        raise ValueError("continuous training needs a dataset with token vectors")
    if dataset.classes.max() >= cfg.num_conditions:
        raise ValueError("dataset class ids exceed the model's condition count")


def train_epoch(
    params: ModelParams,
    dataset: Dataset,
    tconfig: TrainConfig,
    stream: RandomStream,
    velocity: dict[str, np.ndarray] | None = None,
) -> tuple[ModelParams, float]:
    """One pass over the dataset with momentum SGD; returns the mean loss.

    Masking ratios follow r = cos(pi * u / 2) clipped to
    [mask_ratio_floor, 1]. Pass the same `velocity` dict across epochs to
    keep optimizer momentum; pass a per-epoch child stream so masks and
    example order differ between epochs.
    """
    _check_dataset(params, dataset)
    cfg = params.config
    n = cfg.seq_len
    count = len(dataset)
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}

    perm = np.argsort(stream.child("perm").uniforms(count), kind="stable")
    null_id = null_condition_id(cfg)
    total, seen = 0.0, 0
    for start in range(0, count, tconfig.batch_size):
        rows = perm[start : start + tconfig.batch_size]
        b = len(rows)
        u_r = stream.child("ratio").uniforms_at(rows)
        ratios = np.clip(np.cos(np.pi * u_r / 2.0), tconfig.mask_ratio_floor, 1.0)
        counts = np.clip(np.round(ratios * n).astype(np.int64), 1, n)
        pos_keys = rows[:, None] * n + np.arange(n)[None, :]
        order = np.argsort(stream.child("maskpos").uniforms_at(pos_keys), axis=1)
        mask = np.zeros((b, n), dtype=bool)
        mask[np.arange(b)[:, None], order] = np.arange(n)[None, :] < counts[:, None]
        conds = dataset.classes[rows].copy()
        if tconfig.label_dropout > 0.0:
            dropped = stream.child("drop").uniforms_at(rows) < tconfig.label_dropout
            conds[dropped] = null_id

        if cfg.token_mode == "discrete":
            loss, grads = discrete_loss_and_grads(params, dataset.tokens[rows], mask, conds)
        else:
            loss, grads = continuous_loss_and_grads(
                params, dataset.vecs[rows], mask, conds,
                stream.child("diff"), key_offset=int(start) * n,
            )
        if tconfig.grad_clip is not None:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > tconfig.grad_clip:
                scale = tconfig.grad_clip / norm
                grads = {name: g * scale for name, g in grads.items()}
        for name, g in grads.items():
            v = velocity[name]
            v *= tconfig.momentum
            v += g
            params.arrays[name] -= (tconfig.learning_rate * v).astype(params.dtype)
        total += loss * b
        seen += b
    return params, total / seen


def train_model(
    params: ModelParams,
    dataset: Dataset,
    tconfig: TrainConfig,
    epochs: int,
    stream: RandomStream,
) -> tuple[ModelParams, list[float]]:
    """Run `epochs` training epochs; returns the per-epoch mean losses."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    losses = []
    for e in range(epochs):
        params, loss = train_epoch(params, dataset, tconfig, stream.child("epoch", e), velocity)
        losses.append(loss)
    return params, losses
