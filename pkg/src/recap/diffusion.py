"""Per-token diffusion head for continuous token mode.

A small GELU MLP predicts the noise added to a clean token, conditioned on a
sinusoidal timestep embedding and the transformer's per-position latent z.
Training draws (t, eps) per token and returns exact gradients for the head
weights and for z (the z gradient is what ties the head to the transformer).
Sampling runs ancestral reverse diffusion over an evenly strided subset of
timesteps, so full and local evaluations can use different step counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import gelu, gelu_grad
from .rng import RandomStream

__all__ = [
    "DiffusionConfig",
    "head_param_spec",
    "init_head_params",
    "betas",
    "alpha_bars",
    "timestep_embedding",
    "head_forward",
    "diffusion_loss",
    "sample_token",
    "sample_tokens",
]


@dataclass(frozen=True)
class DiffusionConfig:
    token_dim: int
    t_d: int = 64
    hidden: tuple[int, ...] = (64, 64)
    t_embed_dim: int = 16
    beta_start: float | None = None  # None = 1000-step-equivalent rescaling
    beta_end: float | None = None

    def __post_init__(self) -> None:
        if self.token_dim < 1:
            raise ValueError("token_dim must be >= 1")
        if self.t_d < 1:
            raise ValueError("t_d must be >= 1")
        if self.t_embed_dim % 2 != 0:
            raise ValueError("t_embed_dim must be even")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def input_dim(self) -> int:
        return 2 * self.token_dim + self.t_embed_dim


def betas(config: DiffusionConfig) -> np.ndarray:
    """Linear beta schedule.

    The default endpoints are the 1000-step convention (1e-4, 0.02) scaled by
    1000/T_d so the forward process still destroys the signal at desk-scale
    step counts; the top end is capped below 1.
    """
    scale = 1000.0 / config.t_d
    lo = config.beta_start if config.beta_start is not None else 1e-4 * scale
    hi = config.beta_end if config.beta_end is not None else min(0.02 * scale, 0.5)
    out = np.linspace(lo, hi, config.t_d, dtype=np.float64)
    if not (np.all(out > 0) and np.all(out < 1)):
        raise ValueError("betas must lie in (0, 1)")
    return out


def alpha_bars(config: DiffusionConfig) -> np.ndarray:
    """Cumulative signal fractions; index t in [0, T_d], alpha_bar_0 = 1."""
    return np.concatenate([[1.0], np.cumprod(1.0 - betas(config))])


def head_param_spec(config: DiffusionConfig) -> list[tuple[str, tuple[int, ...], str]]:
    dims = [config.input_dim, *config.hidden, config.token_dim]
    spec: list[tuple[str, tuple[int, ...], str]] = []
    last = len(dims) - 2
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        # zero final layer: an untrained head predicts eps_hat = 0 exactly
        spec.append((f"dhead.w{i}", (d_in, d_out), "zeros" if i == last else "he"))
        spec.append((f"dhead.b{i}", (d_out,), "zeros"))
    return spec


def init_head_params(
    config: DiffusionConfig, stream: RandomStream, dtype=np.float32
) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, shape, kind in head_param_spec(config):
        if kind == "he":
            arr = stream.child("init", name).normals(shape) * np.sqrt(2.0 / shape[0])
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(dtype)
    return arrays


def timestep_embedding(config: DiffusionConfig, t: np.ndarray) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (len(t), t_embed_dim)."""
    t = np.asarray(t, dtype=np.float64)
    half = config.t_embed_dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _layers(config: DiffusionConfig) -> int:
    return len(config.hidden) + 1


def head_forward(
    arrays: dict[str, np.ndarray],
    config: DiffusionConfig,
    x_t: np.ndarray,
    t: np.ndarray,
    z: np.ndarray,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Predict noise; returns (eps_hat, per-layer pre-activation stash)."""
    dtype = arrays["dhead.w0"].dtype
    temb = timestep_embedding(config, t).astype(dtype)
    u = np.concatenate([x_t.astype(dtype), temb, z.astype(dtype)], axis=-1)
    stash = [u]
    h = u
    n_layers = _layers(config)
    for i in range(n_layers):
        pre = h @ arrays[f"dhead.w{i}"] + arrays[f"dhead.b{i}"]
        if i < n_layers - 1:
            stash.append(pre)
            h = gelu(pre)
            stash.append(h)
        else:
            h = pre
    return h, stash


def _head_backward(
    arrays: dict[str, np.ndarray],
    config: DiffusionConfig,
    stash: list[np.ndarray],
    d_out: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backprop d_out through the MLP; returns (weight grads, d_input)."""
    n_layers = _layers(config)
    grads: dict[str, np.ndarray] = {}
    d = d_out
    for i in reversed(range(n_layers)):
        h_in = stash[0] if i == 0 else stash[2 * i]
        grads[f"dhead.w{i}"] = h_in.T @ d
        grads[f"dhead.b{i}"] = d.sum(axis=0)
        d = d @ arrays[f"dhead.w{i}"].T
        if i > 0:
            d = d * gelu_grad(stash[2 * i - 1])
    return grads, d


def diffusion_loss(
    arrays: dict[str, np.ndarray],
    config: DiffusionConfig,
    z: np.ndarray,
    x: np.ndarray,
    stream: RandomStream,
    keys: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Noise-prediction loss for a batch of clean tokens.

    z, x: (n, token_dim). `keys` (default 0..n-1) key the per-token (t, eps)
    draws, so the loss is a deterministic function of (arrays, z, x, stream).
    `weights` (default 1/n each) weight the per-token losses; the default is
    the plain mean. Returns (loss, gradients). Every entry is a gradient of
    the weighted loss: one per head weight, plus "z" holding the
    (n, token_dim) per-row gradient with respect to each latent.
    """
    z = np.atleast_2d(np.asarray(z))
    x = np.atleast_2d(np.asarray(x))
    if z.shape != x.shape or z.shape[1] != config.token_dim:
        raise ValueError(f"z/x must be (n, {config.token_dim}), got {z.shape} and {x.shape}")
    n = z.shape[0]
    keys = np.arange(n) if keys is None else np.asarray(keys)
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"weights must be ({n},), got {w.shape}")
    t = 1 + (stream.child("t").uniforms_at(keys) * config.t_d).astype(np.int64)
    t = np.minimum(t, config.t_d)
    eps = stream.child("eps").normals_at(keys, config.token_dim)
    abar = alpha_bars(config)[t][:, None]
    x_t = np.sqrt(abar) * x + np.sqrt(1.0 - abar) * eps

    eps_hat, stash = head_forward(arrays, config, x_t, t, z)
    resid = eps_hat - eps.astype(eps_hat.dtype)
    loss = float(np.sum(w * np.sum(resid * resid, axis=-1)))
    d_out = 2.0 * w[:, None] * resid
    grads, d_in = _head_backward(arrays, config, stash, d_out.astype(eps_hat.dtype))
    grads["z"] = d_in[:, config.token_dim + config.t_embed_dim :]
    return loss, grads


def sample_tokens(
    arrays: dict[str, np.ndarray],
    config: DiffusionConfig,
    z: np.ndarray,
    steps: int,
    stream: RandomStream,
    keys: np.ndarray | None = None,
) -> np.ndarray:
    """Ancestral reverse diffusion for a batch of latents z (n, token_dim).

    Uses an evenly strided descending subset of `steps` timesteps out of
    [1, T_d]; steps = T_d is exact DDPM ancestral sampling. Noise is keyed
    per (key, timestep), so results are independent of batch composition.
    """
    if not 1 <= steps <= config.t_d:
        raise ValueError(f"steps must be in [1, {config.t_d}], got {steps}")
    z = np.atleast_2d(np.asarray(z))
    n = z.shape[0]
    keys = np.arange(n) if keys is None else np.asarray(keys)
    ts = np.unique(np.round(np.linspace(config.t_d, 1, steps)).astype(np.int64))[::-1]
    abar = alpha_bars(config)
    x = stream.child("x_init").normals_at(keys, config.token_dim)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        a_t, a_prev = abar[t], abar[t_prev]
        alpha_eff = a_t / a_prev
        beta_eff = 1.0 - alpha_eff
        eps_hat, _ = head_forward(arrays, config, x, np.full(n, t), z)
        mean = (x - beta_eff / np.sqrt(1.0 - a_t) * eps_hat.astype(np.float64)) / np.sqrt(alpha_eff)
        if t_prev > 0:
            sigma = np.sqrt(beta_eff * (1.0 - a_prev) / (1.0 - a_t))
            noise = stream.child("ancestral", int(t)).normals_at(keys, config.token_dim)
            x = mean + sigma * noise
        else:
            x = mean
    return x


def sample_token(
    arrays: dict[str, np.ndarray],
    config: DiffusionConfig,
    z: np.ndarray,
    steps: int,
    stream: RandomStream,
    key: int = 0,
) -> np.ndarray:
    """Sample one continuous token from its latent z (token_dim,)."""
    out = sample_tokens(arrays, config, z[None, :], steps, stream, np.array([key]))
    return out[0]
