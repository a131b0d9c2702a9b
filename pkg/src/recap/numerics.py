"""Small numeric kernels shared by the model, sampler, and diffusion head.

Everything is plain numpy, dtype-preserving, and deterministic: reductions go
through numpy/BLAS, whose evaluation order is fixed per machine, so repeated
runs on identical inputs are bit-identical. 32-bit is the working precision;
the oracle tests rerun everything in 64-bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "gelu_grad",
    "cosine_similarity",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit conformance check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax(values: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax, max-subtracted for overflow safety."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("softmax of an empty array is undefined")
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    scaled = values / np.asarray(temperature, dtype=values.dtype)
    scaled = scaled - np.max(scaled, axis=axis, keepdims=True)
    e = np.exp(scaled)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("log_softmax of an empty array is undefined")
    shifted = values - np.max(values, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Constant rows come out as `bias` exactly: the centered numerator is zero
    and eps keeps the denominator finite.
    """
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ValueError(
            f"gain/bias must match the last axis: x {x.shape}, "
            f"gain {gain.shape}, bias {bias.shape}"
        )
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    return centered * inv * gain + bias


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU."""
    x = np.asarray(x)
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    out = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi
    return out.astype(x.dtype, copy=False)


def cosine_similarity(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> float:
    """Cosine similarity of two flat vectors (used by the drift probe)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    denom = max(float(np.linalg.norm(a)) * float(np.linalg.norm(b)), eps)
    return float(np.dot(a, b) / denom)
