"""Run the benchmark harness over a small method-by-budget grid.

Builds a throwaway checkpoint, writes a benchmark config with baseline
and grouped cells, and runs the harness: per cell and seed it decodes
quality samples, times single-sample decodes (median of warm reps), and
writes one CSV row plus a JSON summary next to it.
"""

from __future__ import annotations

import argparse
import json
import tempfile
from pathlib import Path

import numpy as np

from recap.bench import BENCH_CSV_HEADER, run_benchmark
from recap.checkpoint import save_checkpoint
from recap.model import ModelConfig, init_params
from recap.rng import RandomStream


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    workdir = Path(tempfile.mkdtemp(prefix="recap-bench-"))
    config = ModelConfig(seq_len=16, embed_dim=32, heads=2, layers=2,
                         arch="decoder_only", token_mode="discrete",
                         vocab=4, num_conditions=2)
    stream = RandomStream(args.seed)
    params = init_params(config, stream.child("init"), scale=0.05)
    for name in ("head_w", "head_b"):
        params.arrays[name] += stream.child("head", name).normals(
            params.arrays[name].shape).astype(np.float32) * 0.05
    ckpt = workdir / "model.rcap"
    save_checkpoint(params, config, ckpt)

    plan = {
        "model": {"checkpoint": str(ckpt)},
        "schedule": {"kind": "cosine"},
        "sampler": {"selector": "confidence"},
        "dataset": {"side": 4, "vocab": 4, "num_classes": 2},
        "bench": {
            "seeds": [0, 1],
            "samples_per_seed": 100,
            "repetitions": 5,
            "cells": [
                {"method": "baseline", "T": 8},
                {"method": "recap", "T": 6, "T_prime": 2, "u": 4},
            ],
        },
    }
    cfg_path = workdir / "bench.json"
    cfg_path.write_text(json.dumps(plan, indent=2))
    out_csv = workdir / "results.csv"

    rows = run_benchmark(cfg_path, out_csv, parallel=1)
    print(",".join(BENCH_CSV_HEADER))
    for row in rows:
        vals = row.as_csv_row()
        print(",".join(f"{vals[c]:.3f}" if isinstance(vals[c], float)
                       else str(vals[c]) for c in BENCH_CSV_HEADER))

    summary = json.loads(out_csv.with_suffix(".json").read_text())
    print("\nper-cell summary:")
    for cell in summary["cells"]:
        print(f"  {cell['method']:8s} T={cell['T']} T'={cell['T_prime']}: "
              f"mean TV {cell['mean_quality_tv']:.4f}, "
              f"mean {cell['mean_wall_ms']:.2f} ms/sample, "
              f"attn FLOPs {cell['attn_flops']:,}")
    print(f"\nartifacts in {workdir}")


if __name__ == "__main__":
    main()
