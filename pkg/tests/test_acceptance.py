"""End-to-end acceptance checks, one test per criterion.

Each test prints exactly one `criterion N (name): PASS/FAIL - detail` line
(visible with -s/-rA or in captured output), asserts the stated tolerances,
and checks its own runtime budget. The slow shared fixtures train two toy
models once per module: a discrete 10x10 checkerboard-Markov model and a
continuous 8x8 codebook model. Training streams are fully keyed, so both
fixtures are reproducible bit for bit.
"""

from __future__ import annotations

import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from recap import cli
from recap.bench import BENCH_CSV_HEADER, quality_statistic, run_benchmark
from recap.checkpoint import load_checkpoint, save_checkpoint
from recap.costs import flops_full, flops_full_terms, flops_local, flops_local_terms
from recap.data import SyntheticDatasetSpec, generate_dataset, make_codebook
from recap.diffusion import DiffusionConfig, init_head_params
from recap.drift import drift_curve
from recap.grid import TokenGrid
from recap.kvcache import build_cache
from recap.model import ModelConfig, forward_full, forward_partial, init_params
from recap.pipeline import SamplerConfig, TrainConfig, decode_baseline, decode_recap, train_epoch
from recap.rng import RandomStream
from recap.schedule import build_grouped_schedule, cosine_schedule, polynomial_schedule
from recap.verify import (
    check_frozen_context,
    check_gradients,
    check_gumbel_top_k,
    check_schedule_tables,
)


def _report(num: int, name: str, ok: bool, detail: str) -> None:
    print(f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")


# shared trained fixtures ---------------------------------------------------------

TOY_SPEC = SyntheticDatasetSpec(side=10, vocab=8, num_classes=2)
TOY_CONFIG = ModelConfig(seq_len=100, embed_dim=64, heads=4, layers=4,
                         arch="decoder_only", token_mode="discrete",
                         vocab=8, num_conditions=2)
# (learning rate, epochs): SGD needs the large init scale and the decay
# phases to sharpen attention past the parity-only plateau; each epoch
# draws a fresh keyed dataset so the model cannot memorize examples.
TOY_PHASES = ((0.05, 120), (0.02, 80), (0.01, 40))

CONT_SPEC = SyntheticDatasetSpec(side=8, vocab=8, num_classes=2)
CONT_CONFIG = ModelConfig(seq_len=64, embed_dim=64, heads=4, layers=4,
                          arch="decoder_only", token_mode="continuous",
                          token_dim=4, num_conditions=2)
CONT_DIFFUSION = DiffusionConfig(token_dim=4, t_d=64)
CONT_PHASES = ((0.05, 60), (0.02, 30))


def _train_online(params, spec, phases, codebook=None):
    """Momentum-SGD training on a fresh keyed dataset each epoch."""
    velocity = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
    stream = RandomStream(43)
    losses = []
    epoch = 0
    for lr, epochs in phases:
        tcfg = TrainConfig(batch_size=32, learning_rate=lr, momentum=0.9)
        for _ in range(epochs):
            epoch += 1
            data = generate_dataset(spec, 512, RandomStream(1000 + epoch))
            if codebook is not None:
                data = data.with_codebook(codebook)
            params, loss = train_epoch(params, data, tcfg,
                                       stream.child("epoch", epoch), velocity)
            losses.append(loss)
    return params, losses


@pytest.fixture(scope="module")
def toy():
    params = init_params(TOY_CONFIG, RandomStream(42), scale=0.1)
    params, losses = _train_online(params, TOY_SPEC, TOY_PHASES)
    print(f"[toy fixture] {len(losses)} epochs, loss {losses[0]:.4f} -> "
          f"{losses[-1]:.4f}")
    return params


@pytest.fixture(scope="module")
def continuous_toy():
    book = make_codebook(CONT_SPEC.vocab, CONT_CONFIG.token_dim, RandomStream(7))
    stream = RandomStream(42)
    params = init_params(CONT_CONFIG, stream.child("body"), scale=0.1)
    params.arrays.update(init_head_params(CONT_DIFFUSION, stream.child("head")))
    params.diffusion = CONT_DIFFUSION
    params, losses = _train_online(params, CONT_SPEC, CONT_PHASES, codebook=book)
    print(f"[continuous fixture] {len(losses)} epochs, loss {losses[0]:.4f} -> "
          f"{losses[-1]:.4f}")
    return params, book


def _decode_many(params, kind, T, T_prime, u, seed, n_samples, scfg,
                 tau_low=None):
    """Decode n_samples grids with per-sample keyed streams and conditions."""
    num_classes = params.config.num_conditions
    base = cosine_schedule(T + T_prime, params.config.seq_len, tau_low)
    gsched = build_grouped_schedule(T, T_prime, u, base) if kind == "recap" else None
    stream = RandomStream(seed)
    grids = []
    ledger = None
    for i in range(n_samples):
        s = stream.child("sample", i)
        cond = int(s.child("cond").uniform() * num_classes)
        if kind == "baseline":
            grid, ledger = decode_baseline(params, base, scfg, cond, s)
        else:
            grid, ledger = decode_recap(params, gsched, scfg, cond, s)
        grids.append(grid)
    return grids, ledger


# the ten criteria ----------------------------------------------------------------


def test_criterion_01_frozen_context_equivalence():
    r = check_frozen_context(0)
    _report(1, "frozen-context equivalence", r.passed and r.elapsed_s < 60,
            f"{r.detail} [{r.elapsed_s:.1f}s]")
    assert r.passed, r.detail
    assert r.elapsed_s < 60


def test_criterion_02_zero_local_degeneracy(toy):
    t0 = time.perf_counter()
    scfg = SamplerConfig(selector="confidence")
    base = cosine_schedule(12, TOY_CONFIG.seq_len)
    degenerate = build_grouped_schedule(12, 0, u=12, base=base)
    identical = 0
    for seed in range(20):
        stream_a = RandomStream(9000 + seed)
        stream_b = RandomStream(9000 + seed)
        cond = seed % 2
        grid_a, _ = decode_baseline(toy, base, scfg, cond, stream_a)
        grid_b, _ = decode_recap(toy, degenerate, scfg, cond, stream_b)
        same_ids = np.array_equal(grid_a.ids, grid_b.ids)
        same_mask = np.array_equal(grid_a.mask, grid_b.mask)
        same_hist = len(grid_a.history) == len(grid_b.history) and all(
            sa == sb and np.array_equal(pa, pb)
            for (sa, pa), (sb, pb) in zip(grid_a.history, grid_b.history)
        )
        identical += same_ids and same_mask and same_hist
    elapsed = time.perf_counter() - t0
    ok = identical == 20 and elapsed < 60
    _report(2, "zero-local degeneracy",
            ok, f"{identical}/20 seeds bit-identical [{elapsed:.1f}s]")
    assert identical == 20
    assert elapsed < 60


def test_criterion_03_schedule_tables():
    r = check_schedule_tables(0)
    cos = list(cosine_schedule(8, 256).decode_counts)
    poly = list(polynomial_schedule(4, 100, 2.5).decode_counts)
    g1 = build_grouped_schedule(12, 4, u=8, base=cosine_schedule(16, 256))
    g2 = build_grouped_schedule(15, 5, u=10, base=cosine_schedule(20, 256))
    subs1 = sum(len(g) for g in g1.groups())
    subs2 = sum(len(g) for g in g2.groups())
    ok = (r.passed and cos == [5, 15, 24, 31, 39, 45, 48, 49]
          and sum(cos) == 256 and poly == [4, 14, 31, 51]
          and subs1 == 16 and subs2 == 20)
    _report(3, "schedule tables", ok,
            f"cosine {cos}, polynomial {poly}, grouped sub-steps {subs1} and {subs2}")
    assert cos == [5, 15, 24, 31, 39, 45, 48, 49] and sum(cos) == 256
    assert poly == [4, 14, 31, 51]
    assert subs1 == 16 and subs2 == 20
    assert r.passed, r.detail


def test_criterion_04_gumbel_top_k():
    r = check_gumbel_top_k(0)
    _report(4, "gumbel-top-k chi-square", r.passed and r.elapsed_s < 30,
            f"{r.detail} [{r.elapsed_s:.1f}s]")
    assert r.passed, r.detail
    assert r.elapsed_s < 30


def test_criterion_05_gradient_checks():
    r = check_gradients(0)
    _report(5, "gradient checks", r.passed and r.elapsed_s < 120,
            f"{r.detail} [{r.elapsed_s:.1f}s]")
    assert r.passed, r.detail
    assert r.elapsed_s < 120


def test_criterion_06_drift_reproduction(toy):
    t0 = time.perf_counter()
    data = generate_dataset(TOY_SPEC, 500, RandomStream(11))
    counts = (0, 1, 2, 4, 8, 16)
    curves = {K: drift_curve(toy, data, K, counts, 500, RandomStream(12),
                             fill="truth")
              for K in (4, 16, 48)}
    exact_one = all(c.mean_similarity[0] == 1.0 for c in curves.values())
    m1_ge_m16 = all(c.mean_similarity[1] >= c.mean_similarity[5]
                    for c in curves.values())
    monotone_k = all(
        curves[16].mean_similarity[i] >= curves[4].mean_similarity[i] - 0.005
        and curves[48].mean_similarity[i] >= curves[16].mean_similarity[i] - 0.005
        for i in range(1, len(counts))
    )
    elapsed = time.perf_counter() - t0
    ok = exact_one and m1_ge_m16 and monotone_k and elapsed < 600
    detail = (f"m=0 exact {exact_one}, m1>=m16 {m1_ge_m16}, K-monotone "
              f"{monotone_k}; K=48 row "
              + "/".join(f"{v:.4f}" for v in curves[48].mean_similarity)
              + f" [{elapsed:.0f}s]")
    _report(6, "drift reproduction", ok, detail)
    assert exact_one
    assert m1_ge_m16
    assert monotone_k
    assert elapsed < 600


def test_criterion_07_cost_accounting():
    t0 = time.perf_counter()
    big = ModelConfig(seq_len=1024, embed_dim=256, heads=8, layers=8,
                      arch="decoder_only", token_mode="discrete", vocab=16,
                      num_conditions=2)
    score_ratio = Fraction(flops_local_terms(big, 32)["scores"],
                           flops_full_terms(big)["scores"])
    total_ratio = Fraction(flops_local(big, 32), flops_full(big))
    stream = RandomStream(5)
    params = init_params(big, stream, scale=0.02)
    ids = (stream.child("ids").uniforms_at(np.arange(1024)) * 16).astype(np.int64)
    grid = TokenGrid.from_ids(ids, condition=0)
    record = forward_full(params, grid)
    targets = np.sort(np.argsort(stream.child("t").uniforms_at(np.arange(1024)))[:32])
    cache = build_cache(record, targets)

    def median_ms(fn, reps=5):
        fn()
        samples = []
        for _ in range(reps):
            start = time.perf_counter_ns()
            fn()
            samples.append(time.perf_counter_ns() - start)
        return float(np.median(samples)) / 1e6

    full_ms = median_ms(lambda: forward_full(params, grid))
    local_ms = median_ms(lambda: forward_partial(params, grid, targets, cache))
    elapsed = time.perf_counter() - t0
    ok = (score_ratio == Fraction(32, 1024) and total_ratio == Fraction(32, 1024)
          and local_ms < 0.5 * full_ms and elapsed < 300)
    _report(7, "cost accounting", ok,
            f"score ratio {score_ratio} == 32/1024, local {local_ms:.0f} ms vs "
            f"full {full_ms:.0f} ms (median of 5) [{elapsed:.0f}s]")
    assert score_ratio == Fraction(32, 1024)
    assert total_ratio == Fraction(32, 1024)
    assert local_ms < 0.5 * full_ms
    assert elapsed < 300


def test_criterion_08_table1_pattern(toy):
    t0 = time.perf_counter()
    scfg = SamplerConfig(selector="uniform")
    tvs = {"b12": [], "b16": [], "recap": []}
    flops = {}
    for seed in (0, 1, 2):
        for name, kind, T, Tp, u in (("b12", "baseline", 12, 0, None),
                                     ("b16", "baseline", 16, 0, None),
                                     ("recap", "recap", 12, 4, 8)):
            grids, ledger = _decode_many(toy, kind, T, Tp, u,
                                         5000 + seed, 1000, scfg)
            tvs[name].append(quality_statistic(grids, TOY_SPEC))
            flops[name] = ledger.attention_flops
    m12, m16, mr = (float(np.mean(tvs[k])) for k in ("b12", "b16", "recap"))
    flop_cut = 1.0 - flops["recap"] / flops["b16"]
    elapsed = time.perf_counter() - t0
    ok = (mr <= m12 and abs(mr - m16) <= 0.02 and flop_cut >= 0.15
          and elapsed < 1200)
    _report(8, "table-1 pattern", ok,
            f"mean TV recap {mr:.4f} vs 12-step {m12:.4f} vs 16-step {m16:.4f}, "
            f"attention-FLOP cut {flop_cut:.1%} [{elapsed:.0f}s]")
    assert mr <= m12, (mr, m12)
    assert abs(mr - m16) <= 0.02, (mr, m16)
    assert flop_cut >= 0.15
    assert elapsed < 1200


def test_criterion_09_continuous_local_steps(continuous_toy):
    t0 = time.perf_counter()
    params, book = continuous_toy
    results = {}
    for local_steps in (64, 32):
        scfg = SamplerConfig(selector="uniform", full_steps=64,
                             local_steps=local_steps)
        grids, ledger = _decode_many(params, "recap", 6, 2, 4, 6000, 500, scfg)
        results[local_steps] = (quality_statistic(grids, CONT_SPEC, book), ledger)
    tv64, led64 = results[64]
    tv32, led32 = results[32]
    elapsed = time.perf_counter() - t0
    ok = (abs(tv32 - tv64) <= 0.02
          and led32.diffusion_local_count == led64.diffusion_local_count // 2
          and led32.diffusion_full_count == led64.diffusion_full_count
          and elapsed < 1200)
    _report(9, "continuous local steps", ok,
            f"TV {tv32:.4f} (32-step locals) vs {tv64:.4f} (64), local denoiser "
            f"apps {led32.diffusion_local_count} vs {led64.diffusion_local_count} "
            f"[{elapsed:.0f}s]")
    assert abs(tv32 - tv64) <= 0.02, (tv32, tv64)
    assert led32.diffusion_local_count == led64.diffusion_local_count // 2
    assert led32.diffusion_full_count == led64.diffusion_full_count
    assert elapsed < 1200


def test_criterion_10_interfaces(tmp_path, capsys):
    # checkpoint round-trip is bit-exact
    config = ModelConfig(seq_len=16, embed_dim=32, heads=2, layers=2,
                         arch="decoder_only", token_mode="discrete",
                         vocab=4, num_conditions=2)
    stream = RandomStream(3)
    params = init_params(config, stream, scale=0.05)
    for name in ("head_w", "head_b"):
        params.arrays[name] += stream.child("h", name).normals(
            params.arrays[name].shape).astype(np.float32) * 0.05
    path_a = tmp_path / "a.rcap"
    path_b = tmp_path / "b.rcap"
    save_checkpoint(params, config, path_a)
    loaded, loaded_config = load_checkpoint(path_a)
    bit_exact = loaded_config == config and all(
        np.array_equal(loaded.arrays[k], params.arrays[k])
        and loaded.arrays[k].dtype == params.arrays[k].dtype
        for k in params.arrays
    )
    save_checkpoint(loaded, loaded_config, path_b)
    bit_exact = bit_exact and path_a.read_bytes() == path_b.read_bytes()

    # benchmark CSV header and the x2 NFE convention under CFG
    plan = {
        "model": {"checkpoint": str(path_a)},
        "sampler": {"selector": "confidence", "cfg_scale": 1.5},
        "dataset": {"side": 4, "vocab": 4, "num_classes": 2},
        "bench": {
            "seeds": [0],
            "samples_per_seed": 100,
            "repetitions": 5,
            "cells": [
                {"method": "baseline", "T": 4},
                {"method": "recap", "T": 3, "T_prime": 1, "u": 2},
            ],
        },
    }
    cfg_path = tmp_path / "bench.json"
    cfg_path.write_text(json.dumps(plan))
    out_csv = tmp_path / "rows.csv"
    rows = run_benchmark(cfg_path, out_csv)
    header_line = out_csv.read_text().splitlines()[0]
    header_ok = header_line == ",".join(BENCH_CSV_HEADER)
    nfe_ok = all(row.nfe == (row.T + row.T_prime) * 2 and row.cfg == 1
                 for row in rows)

    # the verify subcommand runs criteria 1-5 and exits 0
    exit_code = cli.main(["verify"])
    verify_out = capsys.readouterr().out
    verify_ok = exit_code == 0 and verify_out.count("PASS") >= 5

    ok = bit_exact and header_ok and nfe_ok and verify_ok
    _report(10, "interfaces", ok,
            f"round-trip bit-exact {bit_exact}, header ok {header_ok}, "
            f"nfe=(T+T')x2 {nfe_ok}, verify exit {exit_code}")
    assert bit_exact
    assert header_ok, header_line
    assert nfe_ok
    assert verify_ok


def test_training_run_oracle_n64():
    """200 epochs on the pinned N=64 configuration halves the loss.

    Recorded value: the run below reaches ~0.87 from ln 8 = 2.079 (a 58%
    decrease) with the same recipe the module fixtures use.
    """
    spec = SyntheticDatasetSpec(side=8, vocab=8, num_classes=2)
    config = ModelConfig(seq_len=64, embed_dim=64, heads=4, layers=4,
                         arch="decoder_only", token_mode="discrete",
                         vocab=8, num_conditions=2)
    params = init_params(config, RandomStream(42), scale=0.1)
    velocity = {name: np.zeros_like(arr) for name, arr in params.arrays.items()}
    tcfg = TrainConfig(batch_size=32, learning_rate=0.05, momentum=0.9)
    stream = RandomStream(43)
    losses = []
    for epoch in range(1, 201):
        data = generate_dataset(spec, 512, RandomStream(2000 + epoch))
        params, loss = train_epoch(params, data, tcfg,
                                   stream.child("epoch", epoch), velocity)
        losses.append(loss)
    decrease = 1.0 - losses[-1] / losses[0]
    print(f"training oracle: loss {losses[0]:.4f} -> {losses[-1]:.4f} "
          f"({decrease:.1%} decrease)")
    assert decrease >= 0.5, (losses[0], losses[-1])
