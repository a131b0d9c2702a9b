"""Toy bidirectional transformer over token grids.

Two architectures share one block implementation: `decoder_only` runs a
single stack over all N positions; `encoder_decoder` runs an encoder over
the condition slot plus unmasked positions only, then a decoder over the
condition slot plus all N positions with encoder outputs substituted at
unmasked slots. Blocks are pre-norm with an exact-GELU MLP; attention is
full and bidirectional (no causal mask).

`forward_full` returns a ForwardRecord carrying per-layer block-input taps
and K/V matrices, which is everything grouped decoding needs to build a
cache. `forward_partial` recomputes Q/K/V and MLP only at target positions,
attending over fresh target rows concatenated with cached rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .grid import TokenGrid
from .kvcache import COND_SLOT, CacheMismatch, DecodingCache, assemble_attention_context
from .numerics import gelu, layer_norm, softmax

if TYPE_CHECKING:  # pragma: no cover
    from .diffusion import DiffusionConfig

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ForwardRecord",
    "PartialResult",
    "init_params",
    "forward_full",
    "forward_partial",
    "null_condition_id",
    "param_spec",
]

_BLOCK_WEIGHTS = (
    ("ln1_g", "ones"),
    ("ln1_b", "zeros"),
    ("wq", "normal"),
    ("bq", "zeros"),
    ("wk", "normal"),
    ("bk", "zeros"),
    ("wv", "normal"),
    ("bv", "zeros"),
    ("wo", "normal"),
    ("bo", "zeros"),
    ("ln2_g", "ones"),
    ("ln2_b", "zeros"),
    ("mlp_w1", "normal"),
    ("mlp_b1", "zeros"),
    ("mlp_w2", "normal"),
    ("mlp_b2", "zeros"),
)


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int
    embed_dim: int
    heads: int
    layers: int
    arch: str = "decoder_only"  # or "encoder_decoder"
    token_mode: str = "discrete"  # or "continuous"
    vocab: int = 0
    token_dim: int = 0
    decoder_layers: int = 0
    mlp_ratio: float = 4.0
    num_conditions: int = 1

    def __post_init__(self) -> None:
        if self.arch not in ("decoder_only", "encoder_decoder"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.token_mode not in ("discrete", "continuous"):
            raise ValueError(f"unknown token_mode {self.token_mode!r}")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}"
            )
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.token_mode == "discrete" and self.vocab < 2:
            raise ValueError("discrete mode needs vocab >= 2")
        if self.token_mode == "continuous" and self.token_dim < 1:
            raise ValueError("continuous mode needs token_dim >= 1")
        if self.arch == "encoder_decoder" and self.decoder_layers < 1:
            raise ValueError("encoder_decoder needs decoder_layers >= 1")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")
        if self.num_conditions < 1:
            raise ValueError("num_conditions must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def out_dim(self) -> int:
        return self.vocab if self.token_mode == "discrete" else self.token_dim

    def stacks(self) -> list[tuple[str, int]]:
        if self.arch == "decoder_only":
            return [("dec", self.layers)]
        return [("enc", self.layers), ("dec", self.decoder_layers)]


def null_condition_id(config: ModelConfig) -> int:
    """Reserved condition id for unconditional passes (classifier-free guidance)."""
    return config.num_conditions


def param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init kind) for every model array."""
    d, h = config.embed_dim, config.mlp_dim
    spec: list[tuple[str, tuple[int, ...], str]] = []
    if config.token_mode == "discrete":
        spec.append(("tok_embed", (config.vocab, d), "normal"))
    else:
        spec.append(("in_proj_w", (config.token_dim, d), "normal"))
        spec.append(("in_proj_b", (d,), "zeros"))
    spec.append(("pos_embed", (config.seq_len, d), "normal"))
    spec.append(("mask_embed", (d,), "normal"))
    spec.append(("cond_embed", (config.num_conditions + 1, d), "normal"))
    shapes = {
        "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "bq": (d,), "bk": (d,), "bv": (d,), "bo": (d,),
        "mlp_w1": (d, h), "mlp_b1": (h,), "mlp_w2": (h, d), "mlp_b2": (d,),
    }
    for stack, layers in config.stacks():
        for i in range(layers):
            for name, kind in _BLOCK_WEIGHTS:
                spec.append((f"{stack}{i}.{name}", shapes[name], kind))
    if config.arch == "encoder_decoder":
        spec.append(("enc_final_ln_g", (d,), "ones"))
        spec.append(("enc_final_ln_b", (d,), "zeros"))
    spec.append(("final_ln_g", (d,), "ones"))
    spec.append(("final_ln_b", (d,), "zeros"))
    # zero head: an untrained model yields exactly uniform logits
    spec.append(("head_w", (d, config.out_dim), "zeros"))
    spec.append(("head_b", (config.out_dim,), "zeros"))
    return spec


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    diffusion: "DiffusionConfig | None" = None

    @property
    def dtype(self) -> np.dtype:
        return self.arrays["pos_embed"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            config=self.config,
            arrays={k: v.astype(dtype) for k, v in self.arrays.items()},
            diffusion=self.diffusion,
        )

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            arrays={k: v.copy() for k, v in self.arrays.items()},
            diffusion=self.diffusion,
        )


def init_params(config, stream, scale: float = 0.02, dtype=np.float32) -> ModelParams:
    arrays: dict[str, np.ndarray] = {}
    for name, shape, kind in param_spec(config):
        if kind == "normal":
            arr = stream.child("init", name).normals(shape) * scale
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams(config=config, arrays=arrays)


@dataclass
class ForwardRecord:
    """Everything a full pass produces: outputs, layer taps, and K/V rows."""

    config: ModelConfig
    condition: int
    outputs: np.ndarray  # (N, vocab) logits or (N, token_dim) latents
    dec_slot_ids: np.ndarray  # (n_slots,)
    dec_inputs: np.ndarray  # (dec_layers, n_slots, d) block-input taps
    dec_k: np.ndarray  # (dec_layers, n_slots, d)
    dec_v: np.ndarray
    grid: TokenGrid
    enc_slot_ids: np.ndarray | None = None
    enc_inputs: np.ndarray | None = None
    enc_k: np.ndarray | None = None
    enc_v: np.ndarray | None = None

    @property
    def block_inputs(self) -> np.ndarray:
        """Per-layer pre-QKV activations at the N token slots."""
        if len(self.dec_slot_ids) == len(self.grid):
            return self.dec_inputs
        return self.dec_inputs[:, 1:, :]  # drop the condition slot


@dataclass
class PartialResult:
    """Outputs and fresh K/V rows of a partial pass over `targets`."""

    targets: np.ndarray  # sorted token positions
    outputs: np.ndarray  # (len(targets), out_dim)
    dec_k: np.ndarray  # (dec_layers, len(targets), d)
    dec_v: np.ndarray
    enc_new_ids: np.ndarray | None = None
    enc_k: np.ndarray | None = None  # (enc_layers, len(new), d)
    enc_v: np.ndarray | None = None


# attention plumbing --------------------------------------------------------


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scale = np.asarray(1.0 / np.sqrt(qh.shape[-1]), dtype=q.dtype)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    probs = softmax(scores, axis=-1)
    return _merge_heads(probs @ vh)


def _block(
    arrays: dict[str, np.ndarray],
    prefix: str,
    x: np.ndarray,
    heads: int,
    context_k: np.ndarray | None = None,
    context_v: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One pre-norm block. Fresh K/V go first in the attention context."""
    g = arrays
    h = layer_norm(x, g[f"{prefix}.ln1_g"], g[f"{prefix}.ln1_b"])
    q = h @ g[f"{prefix}.wq"] + g[f"{prefix}.bq"]
    k = h @ g[f"{prefix}.wk"] + g[f"{prefix}.bk"]
    v = h @ g[f"{prefix}.wv"] + g[f"{prefix}.bv"]
    k_all = k if context_k is None else np.concatenate([k, context_k], axis=1)
    v_all = v if context_v is None else np.concatenate([v, context_v], axis=1)
    att = _attend(q, k_all, v_all, heads)
    x = x + att @ g[f"{prefix}.wo"] + g[f"{prefix}.bo"]
    h2 = layer_norm(x, g[f"{prefix}.ln2_g"], g[f"{prefix}.ln2_b"])
    x = x + gelu(h2 @ g[f"{prefix}.mlp_w1"] + g[f"{prefix}.mlp_b1"]) @ g[f"{prefix}.mlp_w2"] + g[f"{prefix}.mlp_b2"]
    return x, k, v


def _token_embed(params: ModelParams, grid: TokenGrid, positions: np.ndarray) -> np.ndarray:
    """Committed-value embeddings (no positional term) at `positions`."""
    g = params.arrays
    if params.config.token_mode == "discrete":
        return g["tok_embed"][grid.ids[positions]]
    return grid.vecs[positions].astype(params.dtype) @ g["in_proj_w"] + g["in_proj_b"]


def _check_condition(config: ModelConfig, condition: int | None) -> int:
    cond = null_condition_id(config) if condition is None else int(condition)
    if not 0 <= cond <= config.num_conditions:
        raise ValueError(
            f"condition id {cond} outside [0, {config.num_conditions}] "
            f"({config.num_conditions} is the null id)"
        )
    return cond


def _check_grid(config: ModelConfig, grid: TokenGrid) -> None:
    if len(grid) != config.seq_len:
        raise ValueError(f"grid length {len(grid)} != seq_len {config.seq_len}")
    if grid.continuous != (config.token_mode == "continuous"):
        raise ValueError("grid token mode does not match model config")


def _run_stack(
    arrays: dict[str, np.ndarray], stack: str, layers: int, x: np.ndarray, heads: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Run a full self-attention stack; returns (x, taps, K, V) stacked by layer."""
    taps, ks, vs = [], [], []
    for i in range(layers):
        taps.append(x[0])
        x, k, v = _block(arrays, f"{stack}{i}", x, heads)
        ks.append(k[0])
        vs.append(v[0])
    return x, np.stack(taps), np.stack(ks), np.stack(vs)


def forward_full(
    params: ModelParams, grid: TokenGrid, condition: int | None = None
) -> ForwardRecord:
    """Full bidirectional evaluation of every position, with feature taps."""
    cfg = params.config
    _check_grid(cfg, grid)
    cond = _check_condition(cfg, grid.condition if condition is None else condition)
    g = params.arrays
    n = cfg.seq_len

    if cfg.arch == "decoder_only":
        x = np.where(
            grid.mask[:, None],
            g["mask_embed"][None, :],
            _token_embed(params, grid, np.arange(n)),
        )
        x = x + g["pos_embed"] + g["cond_embed"][cond]
        x = x[None].astype(params.dtype)
        x, taps, ks, vs = _run_stack(g, "dec", cfg.layers, x, cfg.heads)
        h = layer_norm(x, g["final_ln_g"], g["final_ln_b"])
        outputs = (h @ g["head_w"] + g["head_b"])[0]
        return ForwardRecord(
            config=cfg,
            condition=cond,
            outputs=outputs,
            dec_slot_ids=np.arange(n, dtype=np.int64),
            dec_inputs=taps,
            dec_k=ks,
            dec_v=vs,
            grid=grid.copy(),
        )

    # encoder over [cond] + unmasked slots
    unmasked = grid.unmasked_positions()
    enc_ids = np.concatenate([[COND_SLOT], unmasked]).astype(np.int64)
    x_enc = np.empty((1, len(enc_ids), cfg.embed_dim), dtype=params.dtype)
    x_enc[0, 0] = g["cond_embed"][cond]
    if len(unmasked):
        x_enc[0, 1:] = _token_embed(params, grid, unmasked) + g["pos_embed"][unmasked]
    x_enc, enc_taps, enc_ks, enc_vs = _run_stack(g, "enc", cfg.layers, x_enc, cfg.heads)
    enc_out = layer_norm(x_enc, g["enc_final_ln_g"], g["enc_final_ln_b"])[0]

    # decoder over [cond] + all N slots, encoder outputs at unmasked slots
    dec_ids = np.concatenate([[COND_SLOT], np.arange(n)]).astype(np.int64)
    x_dec = np.empty((1, n + 1, cfg.embed_dim), dtype=params.dtype)
    x_dec[0, 0] = enc_out[0]
    body = np.broadcast_to(g["mask_embed"], (n, cfg.embed_dim)).copy()
    body[unmasked] = enc_out[1:]
    x_dec[0, 1:] = body + g["pos_embed"]
    x_dec, dec_taps, dec_ks, dec_vs = _run_stack(
        g, "dec", cfg.decoder_layers, x_dec, cfg.heads
    )
    h = layer_norm(x_dec, g["final_ln_g"], g["final_ln_b"])
    outputs = (h @ g["head_w"] + g["head_b"])[0, 1:]
    return ForwardRecord(
        config=cfg,
        condition=cond,
        outputs=outputs,
        dec_slot_ids=dec_ids,
        dec_inputs=dec_taps,
        dec_k=dec_ks,
        dec_v=dec_vs,
        grid=grid.copy(),
        enc_slot_ids=enc_ids,
        enc_inputs=enc_taps,
        enc_k=enc_ks,
        enc_v=enc_vs,
    )


def _check_partial_preconditions(
    cfg: ModelConfig, grid: TokenGrid, targets: np.ndarray, cache: DecodingCache
) -> None:
    if cache.config != cfg:
        raise CacheMismatch("cache was built for a different model config")
    if targets.size == 0:
        raise ValueError("forward_partial needs at least one target")
    if targets.min() < 0 or targets.max() >= len(grid):
        raise ValueError(f"target positions outside [0, {len(grid)})")
    outside = np.setdiff1d(targets, cache.target_ids)
    if outside.size:
        raise CacheMismatch(
            f"targets {outside.tolist()} overlap the cached complement set"
        )
    # the grid must match the cache's reference state everywhere off-target
    ref = cache.entry_grid
    off = np.setdiff1d(np.arange(len(grid)), targets)
    if not np.array_equal(grid.mask[off], ref.mask[off]):
        raise CacheMismatch("grid mask disagrees with cache reference off-target")
    decoded = off[~grid.mask[off]]
    if grid.continuous:
        same = np.array_equal(grid.vecs[decoded], ref.vecs[decoded])
    else:
        same = np.array_equal(grid.ids[decoded], ref.ids[decoded])
    if not same:
        raise CacheMismatch("grid values disagree with cache reference off-target")


def forward_partial(
    params: ModelParams,
    grid: TokenGrid,
    targets: np.ndarray,
    cache: DecodingCache,
) -> PartialResult:
    """Recompute Q/K/V and MLP only at `targets`, attending over cached rows.

    Targets must lie inside the cache's group target set; the grid may differ
    from the cache's reference state only at target positions. Newly decoded
    targets (unmasked in the grid) are run through the encoder append path in
    encoder_decoder mode.
    """
    cfg = params.config
    _check_grid(cfg, grid)
    targets = np.unique(np.asarray(targets, dtype=np.int64))
    _check_partial_preconditions(cfg, grid, targets, cache)
    g = params.arrays
    cond = cache.condition

    enc_new_ids = enc_new_k = enc_new_v = None
    if cfg.arch == "decoder_only":
        x = np.where(
            grid.mask[targets, None],
            g["mask_embed"][None, :],
            _token_embed(params, grid, targets),
        )
        x = (x + g["pos_embed"][targets] + g["cond_embed"][cond])[None].astype(params.dtype)
        dec_layers = cfg.layers
    else:
        newly = targets[~grid.mask[targets]]
        already = np.intersect1d(newly, cache.enc.slot_ids)
        if already.size:
            raise CacheMismatch(
                f"positions {already.tolist()} are already in the encoder active set"
            )
        enc_out_new = None
        if newly.size:
            x_enc = (_token_embed(params, grid, newly) + g["pos_embed"][newly])[None]
            x_enc = x_enc.astype(params.dtype)
            ks, vs = [], []
            for i in range(cfg.layers):
                view = cache.enc_context(i)
                x_in = x_enc
                h = layer_norm(x_in, g[f"enc{i}.ln1_g"], g[f"enc{i}.ln1_b"])
                q = h @ g[f"enc{i}.wq"] + g[f"enc{i}.bq"]
                k = h @ g[f"enc{i}.wk"] + g[f"enc{i}.bk"]
                v = h @ g[f"enc{i}.wv"] + g[f"enc{i}.bv"]
                k_ctx, v_ctx, _ = assemble_attention_context(view, k[0], v[0], newly)
                att = _attend(q, k_ctx[None], v_ctx[None], cfg.heads)
                x_enc = x_in + att @ g[f"enc{i}.wo"] + g[f"enc{i}.bo"]
                h2 = layer_norm(x_enc, g[f"enc{i}.ln2_g"], g[f"enc{i}.ln2_b"])
                x_enc = x_enc + gelu(h2 @ g[f"enc{i}.mlp_w1"] + g[f"enc{i}.mlp_b1"]) @ g[f"enc{i}.mlp_w2"] + g[f"enc{i}.mlp_b2"]
                ks.append(k[0])
                vs.append(v[0])
            enc_out_new = layer_norm(x_enc, g["enc_final_ln_g"], g["enc_final_ln_b"])[0]
            enc_new_ids, enc_new_k, enc_new_v = newly, np.stack(ks), np.stack(vs)

        x = np.empty((len(targets), cfg.embed_dim), dtype=params.dtype)
        is_new = ~grid.mask[targets]
        x[~is_new] = g["mask_embed"]
        if newly.size:
            # targets are sorted, so newly rows land in sorted order too
            x[is_new] = enc_out_new
        x = (x + g["pos_embed"][targets])[None]
        dec_layers = cfg.decoder_layers

    ks, vs = [], []
    for i in range(dec_layers):
        prefix = f"dec{i}"
        view = cache.dec_context(i, targets)
        h = layer_norm(x, g[f"{prefix}.ln1_g"], g[f"{prefix}.ln1_b"])
        q = h @ g[f"{prefix}.wq"] + g[f"{prefix}.bq"]
        k = h @ g[f"{prefix}.wk"] + g[f"{prefix}.bk"]
        v = h @ g[f"{prefix}.wv"] + g[f"{prefix}.bv"]
        k_ctx, v_ctx, _ = assemble_attention_context(view, k[0], v[0], targets)
        att = _attend(q, k_ctx[None], v_ctx[None], cfg.heads)
        x = x + att @ g[f"{prefix}.wo"] + g[f"{prefix}.bo"]
        h2 = layer_norm(x, g[f"{prefix}.ln2_g"], g[f"{prefix}.ln2_b"])
        x = x + gelu(h2 @ g[f"{prefix}.mlp_w1"] + g[f"{prefix}.mlp_b1"]) @ g[f"{prefix}.mlp_w2"] + g[f"{prefix}.mlp_b2"]
        ks.append(k[0])
        vs.append(v[0])

    h = layer_norm(x, g["final_ln_g"], g["final_ln_b"])
    outputs = (h @ g["head_w"] + g["head_b"])[0]
    return PartialResult(
        targets=targets,
        outputs=outputs,
        dec_k=np.stack(ks),
        dec_v=np.stack(vs),
        enc_new_ids=enc_new_ids,
        enc_k=enc_new_k,
        enc_v=enc_new_v,
    )
