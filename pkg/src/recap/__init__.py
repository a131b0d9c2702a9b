"""Masked generative models with grouped decoding and K/V feature reuse.

A desk-scale numpy stack: a bidirectional transformer over token grids,
iterative parallel decoding, and a grouped decoding mode that interleaves
full forward evaluations with cheap partial evaluations reusing cached K/V
features. Discrete (categorical) and continuous (per-token diffusion head)
token modes share the same pipeline.
"""

from __future__ import annotations

from .rng import RandomStream, gumbel_noise

__all__ = ["RandomStream", "gumbel_noise"]
