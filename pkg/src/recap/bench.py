"""Benchmark orchestration: quality metric, timing, CSV and JSON outputs.

A benchmark run reads one JSON config describing a trained checkpoint, the
generator the model was trained on, and a list of cells (method + step
budget). For each cell and seed it reports a wall-clock per sample (median
over timed repetitions after one warm-up, batch size one, monotonic clock),
the analytic attention-FLOP total from the cost ledger, and the sample
quality statistic: total-variation distance between the decoded grids'
horizontal-neighbor co-occurrence and the generator's analytic table.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import (
    SyntheticDatasetSpec,
    analytic_cooccurrence,
    empirical_cooccurrence,
    make_codebook,
    quantize_to_codebook,
)
from .model import ModelParams
from .pipeline import SamplerConfig, decode_baseline, decode_recap
from .rng import RandomStream
from .schedule import (
    StepSchedule,
    build_grouped_schedule,
    cosine_schedule,
    polynomial_schedule,
)

__all__ = ["BenchRow", "quality_statistic", "run_benchmark", "BENCH_CSV_HEADER"]

BENCH_CSV_HEADER = [
    "run_id", "method", "T", "T_prime", "u", "nfe", "cfg",
    "wall_ms_per_sample", "attn_flops", "quality_tv", "seed",
]

MIN_QUALITY_SAMPLES = 100
MIN_TIMING_REPS = 5


class ConfigError(ValueError):
    """Malformed or incomplete benchmark configuration."""


@dataclass(frozen=True)
class BenchRow:
    run_id: str
    method: str
    T: int
    T_prime: int
    u: int
    nfe: int
    cfg: int
    wall_ms_per_sample: float
    attn_flops: int
    quality_tv: float
    seed: int

    def as_csv_row(self) -> dict[str, object]:
        return {name: getattr(self, name) for name in BENCH_CSV_HEADER}


def quality_statistic(samples, reference: SyntheticDatasetSpec, codebook=None) -> float:
    """TV distance of the samples' co-occurrence table from the analytic one.

    samples is a sequence of fully decoded TokenGrid objects. Continuous
    grids are first snapped to the nearest codebook row; pass the codebook
    the dataset was embedded with.
    """
    grids = list(samples)
    if len(grids) < MIN_QUALITY_SAMPLES:
        raise ValueError(
            f"quality statistic needs >= {MIN_QUALITY_SAMPLES} samples, got {len(grids)}"
        )
    rows = []
    for grid in grids:
        if grid.mask.any():
            raise ValueError("quality statistic expects fully decoded grids")
        if len(grid) != reference.seq_len:
            raise ValueError(
                f"grid has {len(grid)} tokens, generator produces {reference.seq_len}"
            )
        if grid.vecs is not None:
            if codebook is None:
                raise ValueError("continuous grids need a codebook to quantize against")
            rows.append(quantize_to_codebook(grid.vecs, codebook))
        else:
            rows.append(grid.ids)
    tokens = np.stack(rows)
    emp = empirical_cooccurrence(tokens, reference)
    return float(np.abs(emp - analytic_cooccurrence(reference)).sum())


# config parsing -----------------------------------------------------------------


def _base_schedule(sched_cfg: dict, steps: int, num_tokens: int) -> StepSchedule:
    kind = sched_cfg.get("kind", "cosine")
    tau_low = sched_cfg.get("tau_low")
    tau2_init = sched_cfg.get("tau2_init")
    if kind == "cosine":
        return cosine_schedule(steps, num_tokens, tau_low, tau2_init)
    if kind == "polynomial":
        return polynomial_schedule(
            steps, num_tokens, sched_cfg.get("exponent", 2.5), tau_low, tau2_init
        )
    raise ConfigError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class _Cell:
    method: str
    T: int
    T_prime: int
    u: int | None

    @classmethod
    def parse(cls, raw: dict) -> "_Cell":
        method = raw.get("method")
        if method not in ("baseline", "recap"):
            raise ConfigError(f"cell method must be 'baseline' or 'recap', got {method!r}")
        if "T" not in raw:
            raise ConfigError("cell is missing 'T'")
        T = int(raw["T"])
        T_prime = int(raw.get("T_prime", 0))
        if method == "baseline" and T_prime != 0:
            raise ConfigError("baseline cells cannot carry local sub-steps")
        u = raw.get("u")
        return cls(method=method, T=T, T_prime=T_prime, u=None if u is None else int(u))


@dataclass(frozen=True)
class _BenchPlan:
    params: ModelParams
    spec: SyntheticDatasetSpec
    scfg: SamplerConfig
    sched_cfg: dict
    cells: tuple[_Cell, ...]
    seeds: tuple[int, ...]
    samples_per_seed: int
    repetitions: int
    codebook: np.ndarray | None


def _load_plan(config_path) -> _BenchPlan:
    try:
        raw = json.loads(Path(config_path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")

    for key in ("model", "dataset", "bench"):
        if key not in raw:
            raise ConfigError(f"config is missing the {key!r} section")

    model_cfg = raw["model"]
    if "checkpoint" not in model_cfg:
        raise ConfigError("model section needs a 'checkpoint' path")
    params, _ = load_checkpoint(model_cfg["checkpoint"])

    dataset_cfg = dict(raw["dataset"])
    codebook_seed = dataset_cfg.pop("codebook_seed", 0)
    try:
        spec = SyntheticDatasetSpec(**dataset_cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad dataset section: {e}") from e
    if spec.seq_len != params.config.seq_len:
        raise ConfigError(
            f"dataset grids have {spec.seq_len} tokens, model expects {params.config.seq_len}"
        )

    sampler_cfg = dict(raw.get("sampler", {}))
    diffusion_cfg = raw.get("diffusion") or {}
    for key in ("full_steps", "local_steps"):
        if key in diffusion_cfg:
            sampler_cfg[key] = int(diffusion_cfg[key])
    try:
        scfg = SamplerConfig(**sampler_cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad sampler section: {e}") from e

    bench = raw["bench"]
    cells_raw = bench.get("cells")
    if not cells_raw:
        raise ConfigError("bench section needs a non-empty 'cells' list")
    cells = tuple(_Cell.parse(c) for c in cells_raw)
    seeds = tuple(int(s) for s in bench.get("seeds", [0]))
    if not seeds:
        raise ConfigError("bench 'seeds' list is empty")
    samples = int(bench.get("samples_per_seed", 1000))
    if samples < MIN_QUALITY_SAMPLES:
        raise ConfigError(f"samples_per_seed must be >= {MIN_QUALITY_SAMPLES}")
    reps = int(bench.get("repetitions", MIN_TIMING_REPS))
    if reps < MIN_TIMING_REPS:
        raise ConfigError(f"repetitions must be >= {MIN_TIMING_REPS}")

    codebook = None
    if params.config.token_mode == "continuous":
        codebook = make_codebook(
            spec.vocab, params.config.token_dim, RandomStream(codebook_seed)
        )

    return _BenchPlan(
        params=params, spec=spec, scfg=scfg, sched_cfg=raw.get("schedule", {}),
        cells=cells, seeds=seeds, samples_per_seed=samples, repetitions=reps,
        codebook=codebook,
    )


# execution ----------------------------------------------------------------------


def _cell_schedules(plan: _BenchPlan, cell: _Cell):
    num_tokens = plan.params.config.seq_len
    base = _base_schedule(plan.sched_cfg, cell.T + cell.T_prime, num_tokens)
    if cell.method == "baseline":
        return base, None
    grouped = build_grouped_schedule(cell.T, cell.T_prime, cell.u, base)
    return base, grouped


def _decode_one(plan: _BenchPlan, base, grouped, stream: RandomStream):
    condition = int(stream.child("cond").uniform() * plan.spec.num_classes)
    if grouped is None:
        return decode_baseline(plan.params, base, plan.scfg, condition, stream)
    return decode_recap(plan.params, grouped, plan.scfg, condition, stream)


def _quality_for_seed(plan: _BenchPlan, base, grouped, seed: int):
    stream = RandomStream(seed)
    grids = []
    ledger = None
    for i in range(plan.samples_per_seed):
        grid, led = _decode_one(plan, base, grouped, stream.child("sample", i))
        if ledger is None:
            ledger = led
        grids.append(grid)
    tv = quality_statistic(grids, plan.spec, plan.codebook)
    return tv, ledger


def _time_for_seed(plan: _BenchPlan, base, grouped, seed: int) -> float:
    stream = RandomStream(seed)
    _decode_one(plan, base, grouped, stream.child("warmup"))
    elapsed_ms = []
    for r in range(plan.repetitions):
        t0 = time.perf_counter_ns()
        _decode_one(plan, base, grouped, stream.child("rep", r))
        elapsed_ms.append((time.perf_counter_ns() - t0) / 1e6)
    return float(np.median(elapsed_ms))


def run_benchmark(config_path, out_path, parallel: bool = False) -> list[BenchRow]:
    """Run every (cell, seed) pair; write the CSV and a JSON summary.

    The summary lands next to the CSV with a .json suffix. With
    parallel=True the quality decodes run on a thread pool; timing always
    runs sequentially so wall-clock columns stay comparable.
    """
    plan = _load_plan(config_path)
    jobs = [
        (cell, _cell_schedules(plan, cell), seed)
        for cell in plan.cells
        for seed in plan.seeds
    ]

    def quality_job(job):
        cell, (base, grouped), seed = job
        return _quality_for_seed(plan, base, grouped, seed)

    if parallel:
        with ThreadPoolExecutor() as pool:
            quality = list(pool.map(quality_job, jobs))
    else:
        quality = [quality_job(job) for job in jobs]

    rows = []
    cfg_flag = 1 if plan.scfg.cfg_scale is not None else 0
    for job, (tv, ledger) in zip(jobs, quality):
        cell, (base, grouped), seed = job
        wall_ms = _time_for_seed(plan, base, grouped, seed)
        resolved_u = cell.T if grouped is None else grouped.u
        nfe = (cell.T + cell.T_prime) * (2 if cfg_flag else 1)
        rows.append(
            BenchRow(
                run_id=f"{cell.method}-T{cell.T}-Tp{cell.T_prime}-seed{seed}",
                method=cell.method,
                T=cell.T,
                T_prime=cell.T_prime,
                u=resolved_u,
                nfe=nfe,
                cfg=cfg_flag,
                wall_ms_per_sample=wall_ms,
                attn_flops=ledger.attention_flops,
                quality_tv=tv,
                seed=seed,
            )
        )

    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_CSV_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_csv_row())

    summary = {"cells": []}
    per_cell = len(plan.seeds)
    for i, cell in enumerate(plan.cells):
        chunk = rows[i * per_cell : (i + 1) * per_cell]
        summary["cells"].append(
            {
                "method": cell.method,
                "T": cell.T,
                "T_prime": cell.T_prime,
                "mean_wall_ms": float(np.mean([r.wall_ms_per_sample for r in chunk])),
                "mean_quality_tv": float(np.mean([r.quality_tv for r in chunk])),
                "attn_flops": chunk[0].attn_flops,
            }
        )
    out_path.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n")
    return rows
