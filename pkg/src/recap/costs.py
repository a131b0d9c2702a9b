"""Analytic FLOP accounting and per-phase cost ledgers.

FLOP counts are pure functions of the model configuration (multiply-accumulate
counted as 2 FLOPs) and never depend on measured time; wall-clock numbers live
in separate ledger fields. Per transformer layer over N positions with width d:

* QKV + output projections: 4 * N * d^2 MACs
* attention scores:             N^2 * d MACs
* attention-weighted sum:       N^2 * d MACs
* MLP (two matmuls):        2 * N * d * mlp_dim MACs

A partial pass over n_hat target rows replaces N by n_hat in the projection
and MLP terms, while each attention term becomes n_hat * N (fresh queries
attend over the whole sequence). Every term is linear in the row count, so
flops_local(n_hat=N) equals flops_full identically and the score-term ratio
is exactly n_hat / N.
"""

from __future__ import annotations

from dataclasses import dataclass

from .diffusion import DiffusionConfig
from .model import ModelConfig

__all__ = [
    "CostLedger",
    "flops_full",
    "flops_local",
    "flops_full_terms",
    "flops_local_terms",
    "flops_diffusion_step",
]


def _num_layers(config: ModelConfig) -> int:
    return sum(depth for _, depth in config.stacks())


def flops_full_terms(config: ModelConfig) -> dict[str, int]:
    """Per-term FLOPs of one full forward pass, summed over layers."""
    n, d, m = config.seq_len, config.embed_dim, config.mlp_dim
    layers = _num_layers(config)
    return {
        "projections": 2 * 4 * n * d * d * layers,
        "scores": 2 * n * n * d * layers,
        "weighted_sum": 2 * n * n * d * layers,
        "mlp": 2 * 2 * n * d * m * layers,
    }


def flops_local_terms(config: ModelConfig, n_hat: int) -> dict[str, int]:
    """Per-term FLOPs of one partial pass recomputing n_hat rows."""
    if not 0 <= n_hat <= config.seq_len:
        raise ValueError(f"n_hat must be in [0, {config.seq_len}], got {n_hat}")
    n, d, m = config.seq_len, config.embed_dim, config.mlp_dim
    layers = _num_layers(config)
    return {
        "projections": 2 * 4 * n_hat * d * d * layers,
        "scores": 2 * n_hat * n * d * layers,
        "weighted_sum": 2 * n_hat * n * d * layers,
        "mlp": 2 * 2 * n_hat * d * m * layers,
    }


def flops_full(config: ModelConfig) -> int:
    return sum(flops_full_terms(config).values())


def flops_local(config: ModelConfig, n_hat: int) -> int:
    return sum(flops_local_terms(config, n_hat).values())


def flops_diffusion_step(dconfig: DiffusionConfig) -> int:
    """FLOPs of one denoising-MLP application to one token at one timestep."""
    dims = [dconfig.input_dim, *dconfig.hidden, dconfig.token_dim]
    return sum(2 * a * b for a, b in zip(dims[:-1], dims[1:]))


@dataclass
class CostLedger:
    """Counts and costs per decoding phase.

    Counter units: full_fe_count and local_fe_count are forward passes
    (a CFG pass pair counts as two). Diffusion counters are denoising-MLP
    applications, i.e. tokens x timesteps, split by which forward kind
    produced the latents. FLOP fields are analytic; *_ns fields hold
    measured wall-clock nanoseconds.
    """

    full_fe_count: int = 0
    local_fe_count: int = 0
    diffusion_full_count: int = 0
    diffusion_local_count: int = 0
    full_fe_flops: int = 0
    local_fe_flops: int = 0
    diffusion_full_flops: int = 0
    diffusion_local_flops: int = 0
    full_fe_ns: int = 0
    local_fe_ns: int = 0
    diffusion_full_ns: int = 0
    diffusion_local_ns: int = 0

    def add_full_fe(self, config: ModelConfig, elapsed_ns: int = 0) -> None:
        self._check_ns(elapsed_ns)
        self.full_fe_count += 1
        self.full_fe_flops += flops_full(config)
        self.full_fe_ns += elapsed_ns

    def add_local_fe(self, config: ModelConfig, n_hat: int, elapsed_ns: int = 0) -> None:
        self._check_ns(elapsed_ns)
        self.local_fe_count += 1
        self.local_fe_flops += flops_local(config, n_hat)
        self.local_fe_ns += elapsed_ns

    def add_diffusion(
        self,
        dconfig: DiffusionConfig,
        tokens: int,
        steps: int,
        after_full: bool,
        elapsed_ns: int = 0,
    ) -> None:
        self._check_ns(elapsed_ns)
        if tokens < 0 or steps < 0:
            raise ValueError("tokens and steps must be non-negative")
        apps = tokens * steps
        flops = apps * flops_diffusion_step(dconfig)
        if after_full:
            self.diffusion_full_count += apps
            self.diffusion_full_flops += flops
            self.diffusion_full_ns += elapsed_ns
        else:
            self.diffusion_local_count += apps
            self.diffusion_local_flops += flops
            self.diffusion_local_ns += elapsed_ns

    @staticmethod
    def _check_ns(elapsed_ns: int) -> None:
        if elapsed_ns < 0:
            raise ValueError(f"elapsed_ns must be non-negative, got {elapsed_ns}")

    @property
    def attention_flops(self) -> int:
        """Total transformer FLOPs (the benchmark CSV's attn_flops column)."""
        return self.full_fe_flops + self.local_fe_flops

    @property
    def diffusion_count(self) -> int:
        return self.diffusion_full_count + self.diffusion_local_count

    @property
    def total_ns(self) -> int:
        return (
            self.full_fe_ns + self.local_fe_ns + self.diffusion_full_ns + self.diffusion_local_ns
        )

    def merge(self, other: "CostLedger") -> "CostLedger":
        out = CostLedger()
        for name in self.__dataclass_fields__:
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out
