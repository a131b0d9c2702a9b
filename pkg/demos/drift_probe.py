"""Measure how frozen context features drift as nearby tokens commit.

Partial passes reuse K/V rows computed before the latest commits, so the
question is how much the "true" features of frozen positions move once
m new tokens land. The probe freezes K context positions, commits m
hidden ones, and reports the cosine similarity between each layer's
context activations before and after, averaged over samples.
"""

from __future__ import annotations

import argparse

import numpy as np

from recap.data import SyntheticDatasetSpec, generate_dataset
from recap.drift import drift_curve
from recap.model import ModelConfig, init_params
from recap.rng import RandomStream


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    spec = SyntheticDatasetSpec(side=8, vocab=8, num_classes=2)
    data = generate_dataset(spec, args.samples, RandomStream(args.seed))
    config = ModelConfig(seq_len=64, embed_dim=64, heads=4, layers=4,
                         arch="decoder_only", token_mode="discrete",
                         vocab=8, num_conditions=2)
    stream = RandomStream(args.seed + 1)
    params = init_params(config, stream.child("init"), scale=0.05)
    for name in ("head_w", "head_b"):
        params.arrays[name] += stream.child("head", name).normals(
            params.arrays[name].shape).astype(np.float32) * 0.05

    counts = (0, 1, 2, 4, 8, 16)
    print(f"mean cosine similarity of frozen-context activations "
          f"({args.samples} samples)\n")
    print("   K   " + "".join(f"  m={m:<4d}" for m in counts))
    for K in (4, 16, 48):
        curve = drift_curve(params, data, K, counts, args.samples,
                            RandomStream(args.seed + 2), fill="truth")
        row = "".join(f"  {v:.4f}" for v in curve.mean_similarity)
        print(f"  {K:2d}  {row}")
    print("\nm = 0 is exactly 1.0 (nothing committed); similarity decays "
          "with m and\nrecovers with larger frozen K, which is what makes "
          "short local phases safe.")


if __name__ == "__main__":
    main()
