"""Bit-exact checkpoint persistence.

Layout: 4-byte magic "RCAP", 4-byte little-endian version (currently 1),
8-byte little-endian header length, a UTF-8 JSON header (model config,
optional diffusion-head config, ordered array names and shapes), then the
raw little-endian float32 arrays in header order. Arrays are stored as
float32 regardless of working precision; loading a checkpoint saved from
float32 params reproduces them bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .diffusion import DiffusionConfig, head_param_spec
from .model import ModelConfig, ModelParams, param_spec

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"RCAP"
VERSION = 1


class CheckpointError(Exception):
    """Malformed, truncated, or inconsistent checkpoint file."""


def save_checkpoint(params: ModelParams, config: ModelConfig, path: str | Path) -> None:
    if params.config != config:
        raise CheckpointError("params were built for a different config")
    names = list(params.arrays.keys())
    header = {
        "config": dataclasses.asdict(config),
        "diffusion": None if params.diffusion is None else dataclasses.asdict(params.diffusion),
        "arrays": [[name, list(params.arrays[name].shape)] for name in names],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            f.write(np.ascontiguousarray(params.arrays[name], dtype="<f4").tobytes())


def _expected_shapes(config: ModelConfig, diffusion: DiffusionConfig | None) -> dict[str, tuple[int, ...]]:
    expected = {name: shape for name, shape, _ in param_spec(config)}
    if diffusion is not None:
        expected.update({name: shape for name, shape, _ in head_param_spec(diffusion)})
    return expected


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    if 16 + header_len > len(raw):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
        config = ModelConfig(**header["config"])
        diffusion = None if header["diffusion"] is None else DiffusionConfig(**header["diffusion"])
        declared = [(str(n), tuple(int(x) for x in s)) for n, s in header["arrays"]]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"malformed header: {e}") from e

    expected = _expected_shapes(config, diffusion)
    if [n for n, _ in declared] != list(expected.keys()):
        raise CheckpointError("array list does not match the declared config")
    for name, shape in declared:
        if shape != expected[name]:
            raise CheckpointError(
                f"shape mismatch for {name}: header says {shape}, config implies {expected[name]}"
            )

    offset = 16 + header_len
    total = sum(int(np.prod(s)) for _, s in declared) * 4
    if len(raw) - offset != total:
        raise CheckpointError(
            f"payload is {len(raw) - offset} bytes, header implies {total}"
        )
    arrays: dict[str, np.ndarray] = {}
    for name, shape in declared:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float32)
        offset += count * 4
    return ModelParams(config=config, arrays=arrays, diffusion=diffusion), config
