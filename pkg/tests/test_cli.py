"""Command-line interface tests: subcommand wiring, config plumbing, and the
documented exit codes (0 ok, 2 config, 3 checkpoint, 4 verification)."""

from __future__ import annotations

import csv
import json

import numpy as np
import pytest

import recap.cli as cli
from recap.checkpoint import load_checkpoint
from recap.data import SyntheticDatasetSpec, load_dataset_jsonl
from recap.verify import CheckResult


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


TRAIN_CONFIG = {
    "model": {
        "seq_len": 16, "embed_dim": 16, "heads": 2, "layers": 1,
        "arch": "decoder_only", "token_mode": "discrete", "vocab": 4,
        "num_conditions": 2,
    },
    "diffusion": None,
    "dataset": {"side": 4, "vocab": 4, "num_classes": 2, "count": 64},
    "train": {"epochs": 2, "batch_size": 32, "learning_rate": 0.05},
}


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_json(tmp / "train.json", TRAIN_CONFIG)
    out = tmp / "model.ckpt"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    return out


def test_train_writes_a_loadable_checkpoint(ckpt, capsys):
    params, config = load_checkpoint(ckpt)
    assert config.seq_len == 16
    assert params.arrays["head_w"].shape == (16, 4)


def test_train_reports_losses(tmp_path, capsys):
    cfg = write_json(tmp_path / "t.json", TRAIN_CONFIG)
    out = tmp_path / "m.ckpt"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "loss" in text
    assert "saved checkpoint" in text


def test_train_precision_flag(tmp_path):
    cfg = write_json(tmp_path / "t.json", TRAIN_CONFIG)
    out = tmp_path / "m64.ckpt"
    assert cli.main(["train", "--config", cfg, "--out", str(out), "--precision", "f64"]) == 0
    params, _ = load_checkpoint(out)  # storage is always f32
    assert params.arrays["head_w"].dtype == np.float32


def test_generate_baseline_jsonl(ckpt, tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {
        "model": {"checkpoint": str(ckpt)},
        "schedule": {"kind": "cosine", "T": 3},
        "sampler": {"selector": "confidence"},
        "generate": {"count": 5, "condition": 1},
    })
    out = tmp_path / "samples.jsonl"
    assert cli.main(["generate", "--config", cfg, "--out", str(out)]) == 0
    data = load_dataset_jsonl(out, SyntheticDatasetSpec(side=4, vocab=4, num_classes=2))
    assert len(data) == 5
    assert np.all(data.classes == 1)
    assert "wrote 5 grids" in capsys.readouterr().out


def test_generate_grouped_and_unconditional(ckpt, tmp_path):
    cfg = write_json(tmp_path / "g.json", {
        "model": {"checkpoint": str(ckpt)},
        "schedule": {"kind": "cosine", "T": 3, "T_prime": 1},
        "generate": {"count": 3, "condition": None},
    })
    out = tmp_path / "samples.jsonl"
    assert cli.main(["generate", "--config", cfg, "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 3
    assert all(row["class"] is None for row in rows)
    assert all(len(row["tokens"]) == 16 for row in rows)


def test_generate_is_seed_deterministic(ckpt, tmp_path):
    cfg = write_json(tmp_path / "g.json", {
        "model": {"checkpoint": str(ckpt)},
        "schedule": {"T": 2},
        "generate": {"count": 2, "condition": 0},
    })
    a, b, c = (tmp_path / name for name in ("a.jsonl", "b.jsonl", "c.jsonl"))
    assert cli.main(["generate", "--config", cfg, "--out", str(a), "--seed", "7"]) == 0
    assert cli.main(["generate", "--config", cfg, "--out", str(b), "--seed", "7"]) == 0
    assert cli.main(["generate", "--config", cfg, "--out", str(c), "--seed", "8"]) == 0
    assert a.read_text() == b.read_text()
    assert a.read_text() != c.read_text()


def test_bench_subcommand(ckpt, tmp_path, capsys):
    cfg = write_json(tmp_path / "b.json", {
        "model": {"checkpoint": str(ckpt)},
        "dataset": {"side": 4, "vocab": 4, "num_classes": 2},
        "bench": {
            "seeds": [0],
            "samples_per_seed": 100,
            "cells": [{"method": "recap", "T": 2, "T_prime": 1}],
        },
    })
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--config", cfg, "--out", str(out), "--parallel"]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["method"] == "recap"
    assert (tmp_path / "bench.json").exists()
    assert "wrote 1 rows" in capsys.readouterr().out


def test_drift_subcommand(ckpt, tmp_path, capsys):
    cfg = write_json(tmp_path / "d.json", {
        "model": {"checkpoint": str(ckpt)},
        "dataset": {"side": 4, "vocab": 4, "num_classes": 2, "count": 16},
        "drift": {"K": [4, 6], "update_counts": [0, 2], "n_samples": 3},
    })
    out = tmp_path / "drift.csv"
    assert cli.main(["drift", "--config", cfg, "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["K"], r["m"]) for r in rows] == [("4", "0"), ("4", "2"), ("6", "0"), ("6", "2")]
    assert float(rows[0]["mean_similarity"]) == 1.0
    assert "K=   4" in capsys.readouterr().out


def test_schedule_subcommand(capsys):
    assert cli.main(["schedule", "--kind", "cosine", "--steps", "8", "--tokens", "256"]) == 0
    text = capsys.readouterr().out
    assert "step  remaining  decode" in text
    for count in (5, 15, 24, 31, 39, 45, 48, 49):
        assert f"{count:6d}" in text


def test_schedule_grouped_table(tmp_path, capsys):
    out = tmp_path / "table.txt"
    assert cli.main([
        "schedule", "--steps", "6", "--tokens", "16", "--t-prime", "2",
        "--u", "2", "--out", str(out),
    ]) == 0
    text = capsys.readouterr().out
    assert "T=4 full, T'=2 local, u=2" in text
    assert "local" in text
    assert out.read_text().strip() == text.strip()


def test_verify_subcommand_exit_codes(monkeypatch, capsys):
    ok = CheckResult(1, "stub", True, "fine", 0.0)
    bad = CheckResult(2, "stub", False, "broken", 0.0)

    def fake_ok(seed=0, report=print):
        report(ok.line())
        return [ok]

    def fake_bad(seed=0, report=print):
        return [ok, bad]

    monkeypatch.setattr(cli, "run_verification", fake_ok)
    assert cli.main(["verify"]) == 0
    assert "PASS" in capsys.readouterr().out
    monkeypatch.setattr(cli, "run_verification", fake_bad)
    assert cli.main(["verify"]) == 4


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--out", "x.ckpt"],
        ["generate", "--config", "nowhere.json", "--out", "y"],
        ["bench", "--out", "z.csv"],
    ],
)
def test_missing_config_or_file_is_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_out_is_exit_2(ckpt, tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {
        "model": {"checkpoint": str(ckpt)},
        "schedule": {"T": 2},
        "generate": {"count": 1, "condition": 0},
    })
    assert cli.main(["generate", "--config", cfg]) == 2
    assert "--out" in capsys.readouterr().err


def test_bad_model_section_is_exit_2(tmp_path, capsys):
    cfg = write_json(tmp_path / "t.json", {
        "model": {"seq_len": 16, "embed_dim": 15, "heads": 2, "layers": 1, "vocab": 4},
        "dataset": {"side": 4, "vocab": 4, "count": 32},
        "train": {"epochs": 1},
    })
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "m.ckpt")]) == 2
    assert "model" in capsys.readouterr().err


def test_unknown_config_keys_are_exit_2(ckpt, tmp_path):
    cfg = write_json(tmp_path / "g.json", {
        "model": {"checkpoint": str(ckpt)},
        "schedule": {"T": 2, "warmup": 3},
        "generate": {"count": 1, "condition": 0},
    })
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_missing_checkpoint_is_exit_3(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {
        "model": {"checkpoint": str(tmp_path / "nothing.ckpt")},
        "schedule": {"T": 2},
        "generate": {"count": 1, "condition": 0},
    })
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "checkpoint error" in capsys.readouterr().err


def test_truncated_checkpoint_is_exit_3(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"RCAP\x01\x00\x00\x00")
    cfg = write_json(tmp_path / "g.json", {
        "model": {"checkpoint": str(bad)},
        "schedule": {"T": 2},
        "generate": {"count": 1, "condition": 0},
    })
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_drift_k_out_of_range_is_exit_2(ckpt, tmp_path, capsys):
    cfg = write_json(tmp_path / "d.json", {
        "model": {"checkpoint": str(ckpt)},
        "dataset": {"side": 4, "vocab": 4, "num_classes": 2, "count": 8},
        "drift": {"K": [40], "update_counts": [0, 1], "n_samples": 2},
    })
    assert cli.main(["drift", "--config", cfg, "--out", str(tmp_path / "o.csv")]) == 2


def test_schedule_bad_steps_is_exit_2(capsys):
    assert cli.main(["schedule", "--steps", "0", "--tokens", "16"]) == 2
