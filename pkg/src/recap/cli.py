"""Command-line front end.

Subcommands: train, generate, bench, drift, verify, schedule. Every
subcommand accepts --config, --seed, --out, and --precision; which of those
it requires is noted in its help text. Exit codes: 0 success, 2 config
error, 3 checkpoint error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import ConfigError, run_benchmark
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import SyntheticDatasetSpec, generate_dataset, make_codebook
from .diffusion import DiffusionConfig, init_head_params
from .drift import drift_curve, write_drift_csv
from .model import ModelConfig, init_params
from .pipeline import SamplerConfig, TrainConfig, decode_baseline, decode_recap, train_model
from .rng import RandomStream
from .schedule import build_grouped_schedule, cosine_schedule, polynomial_schedule
from .verify import run_verification

__all__ = ["main"]

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _load_json(path) -> dict:
    if path is None:
        raise ConfigError("this subcommand needs --config")
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return raw


def _section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise ConfigError(f"config is missing the {name!r} section")
    section = cfg[name]
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(section)


def _build(cls, kwargs: dict, what: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {what} section: {e}") from e


def _need_out(args) -> Path:
    if args.out is None:
        raise ConfigError("this subcommand needs --out")
    return Path(args.out)


def _dataset_from(cfg: dict, count_default: int | None = None):
    section = _section(cfg, "dataset")
    count = section.pop("count", count_default)
    codebook_seed = section.pop("codebook_seed", 0)
    spec = _build(SyntheticDatasetSpec, section, "dataset")
    return spec, count, codebook_seed


def _schedules_from(cfg: dict, num_tokens: int):
    section = _section(cfg, "schedule")
    kind = section.pop("kind", "cosine")
    T = int(section.pop("T", 8))
    T_prime = int(section.pop("T_prime", 0))
    u = section.pop("u", None)
    exponent = section.pop("exponent", 2.5)
    tau_low = section.pop("tau_low", None)
    tau2_init = section.pop("tau2_init", None)
    if section:
        raise ConfigError(f"unknown schedule keys: {sorted(section)}")
    steps = T + T_prime
    try:
        if kind == "cosine":
            base = cosine_schedule(steps, num_tokens, tau_low, tau2_init)
        elif kind == "polynomial":
            base = polynomial_schedule(steps, num_tokens, exponent, tau_low, tau2_init)
        else:
            raise ConfigError(f"unknown schedule kind {kind!r}")
        grouped = None
        if T_prime > 0:
            grouped = build_grouped_schedule(T, T_prime, None if u is None else int(u), base)
    except ValueError as e:
        raise ConfigError(f"bad schedule section: {e}") from e
    return base, grouped


def _load_model(cfg: dict, precision: str):
    section = _section(cfg, "model")
    if "checkpoint" not in section:
        raise ConfigError("model section needs a 'checkpoint' path")
    params, _ = load_checkpoint(section["checkpoint"])
    return params.astype(_DTYPES[precision])


# subcommands --------------------------------------------------------------------


def _cmd_train(args) -> int:
    cfg = _load_json(args.config)
    out = _need_out(args)
    model_cfg = _build(ModelConfig, _section(cfg, "model"), "model")
    diffusion = None
    if cfg.get("diffusion"):
        diffusion = _build(DiffusionConfig, dict(cfg["diffusion"]), "diffusion")
    spec, count, codebook_seed = _dataset_from(cfg, count_default=512)
    train_section = _section(cfg, "train")
    epochs = int(train_section.pop("epochs", 50))
    tcfg = _build(TrainConfig, train_section, "train")

    master = RandomStream(args.seed)
    data = generate_dataset(spec, int(count), master.child("data"))
    if model_cfg.token_mode == "continuous":
        book = make_codebook(spec.vocab, model_cfg.token_dim, RandomStream(codebook_seed))
        data = data.with_codebook(book)
    params = init_params(model_cfg, master.child("init"))
    if diffusion is not None:
        params.arrays.update(init_head_params(diffusion, master.child("dinit")))
        params.diffusion = diffusion
    params = params.astype(_DTYPES[args.precision])

    params, losses = train_model(params, data, tcfg, epochs, master.child("train"))
    save_checkpoint(params.astype(np.float32), model_cfg, out)
    stride = max(1, epochs // 10)
    for e in range(0, epochs, stride):
        print(f"epoch {e + 1:4d}  loss {losses[e]:.4f}")
    print(f"epoch {epochs:4d}  loss {losses[-1]:.4f}")
    print(f"saved checkpoint to {out}")
    return 0


def _cmd_generate(args) -> int:
    cfg = _load_json(args.config)
    out = _need_out(args)
    params = _load_model(cfg, args.precision)
    scfg = _build(SamplerConfig, dict(cfg.get("sampler", {})), "sampler")
    base, grouped = _schedules_from(cfg, params.config.seq_len)
    gen = dict(cfg.get("generate", {}))
    count = int(gen.pop("count", 16))
    condition = gen.pop("condition", None)
    if gen:
        raise ConfigError(f"unknown generate keys: {sorted(gen)}")
    if count < 1:
        raise ConfigError(f"generate count must be >= 1, got {count}")
    if condition is not None:
        condition = int(condition)

    master = RandomStream(args.seed)
    rows = []
    for i in range(count):
        stream = master.child("sample", i)
        if grouped is None:
            grid, _ = decode_baseline(params, base, scfg, condition, stream)
        else:
            grid, _ = decode_recap(params, grouped, scfg, condition, stream)
        tokens = grid.vecs.tolist() if grid.vecs is not None else grid.ids.tolist()
        rows.append({"tokens": tokens, "class": condition})
    with open(out, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"wrote {count} grids to {out}")
    return 0


def _cmd_bench(args) -> int:
    if args.config is None:
        raise ConfigError("this subcommand needs --config")
    out = _need_out(args)
    rows = run_benchmark(args.config, out, parallel=args.parallel)
    print(f"wrote {len(rows)} rows to {out} (summary: {out.with_suffix('.json')})")
    return 0


def _cmd_drift(args) -> int:
    cfg = _load_json(args.config)
    out = _need_out(args)
    params = _load_model(cfg, args.precision)
    spec, count, codebook_seed = _dataset_from(cfg, count_default=256)
    section = _section(cfg, "drift")
    k_values = section.pop("K", [4])
    if isinstance(k_values, int):
        k_values = [k_values]
    update_counts = tuple(int(m) for m in section.pop("update_counts", [0, 1, 2, 4, 8]))
    n_samples = int(section.pop("n_samples", 100))
    fill = section.pop("fill", "truth")
    if section:
        raise ConfigError(f"unknown drift keys: {sorted(section)}")

    master = RandomStream(args.seed)
    data = generate_dataset(spec, int(count), master.child("data"))
    if params.config.token_mode == "continuous":
        book = make_codebook(spec.vocab, params.config.token_dim, RandomStream(codebook_seed))
        data = data.with_codebook(book)
    curves = []
    for k in k_values:
        try:
            curve = drift_curve(
                params, data, int(k), update_counts, n_samples,
                master.child("K", int(k)), fill=fill,
            )
        except ValueError as e:
            raise ConfigError(f"bad drift section: {e}") from e
        curves.append(curve)
        for row in curve.as_rows():
            print(
                f"K={row['K']:4d} m={row['m']:4d} "
                f"similarity {row['mean_similarity']:.6f} +- {row['layer_std']:.6f}"
            )
    write_drift_csv(curves, out)
    print(f"wrote {sum(len(c.update_counts) for c in curves)} rows to {out}")
    return 0


def _cmd_verify(args) -> int:
    results = run_verification(seed=args.seed)
    return 0 if all(r.passed for r in results) else 4


def _cmd_schedule(args) -> int:
    try:
        if args.kind == "cosine":
            base = cosine_schedule(args.steps, args.tokens)
        else:
            base = polynomial_schedule(args.steps, args.tokens, args.exponent)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    lines = [f"{args.kind} schedule: {args.steps} steps over {args.tokens} tokens"]
    lines.append("step  remaining  decode  tau1    tau2")
    for s in range(base.total_steps):
        lines.append(
            f"{s + 1:4d}  {base.remaining_masked[s]:9d}  {base.decode_counts[s]:6d}"
            f"  {base.tau1[s]:.3f}  {base.tau2[s]:.3f}"
        )
    if args.t_prime > 0:
        try:
            grouped = build_grouped_schedule(
                args.steps - args.t_prime, args.t_prime, args.u, base
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e
        lines.append("")
        lines.append(
            f"grouped: T={grouped.T} full, T'={grouped.T_prime} local, u={grouped.u}"
        )
        lines.append("sub   group  kind   decode  tau1    tau2")
        for sub in grouped.substeps:
            lines.append(
                f"{sub.index:4d}  {sub.group:5d}  {sub.kind:5s}  {sub.decode_count:6d}"
                f"  {sub.tau1:.3f}  {sub.tau2:.3f}"
            )
    text = "\n".join(lines)
    print(text)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    return 0


# parser -------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON config")
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument("--out", help="output path")
    common.add_argument(
        "--precision", choices=("f32", "f64"), default="f32",
        help="parameter precision (default f32)",
    )

    parser = argparse.ArgumentParser(
        prog="recap",
        description="Masked generative decoding with grouped full/local forward passes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model and save a checkpoint (--config, --out)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", parents=[common], help="decode grids from a checkpoint into JSONL (--config, --out)")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("bench", parents=[common], help="run benchmark cells, write CSV + JSON summary (--config, --out)")
    p.add_argument("--parallel", action="store_true",
                   help="parallelize quality decoding over seeds (timing stays sequential)")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("drift", parents=[common], help="measure context-representation drift, write CSV (--config, --out)")
    p.set_defaults(func=_cmd_drift)

    p = sub.add_parser("verify", parents=[common], help="run the built-in verification checks")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("schedule", parents=[common], help="print a decode schedule table")
    p.add_argument("--kind", choices=("cosine", "polynomial"), default="cosine")
    p.add_argument("--steps", type=int, default=8, help="total base steps (T + T')")
    p.add_argument("--tokens", type=int, default=256, help="sequence length")
    p.add_argument("--exponent", type=float, default=2.5, help="polynomial exponent")
    p.add_argument("--t-prime", type=int, default=0, help="local sub-steps to group")
    p.add_argument("--u", type=int, default=None, help="leading full-only groups")
    p.set_defaults(func=_cmd_schedule)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
