"""Tests for the per-token diffusion head."""

from __future__ import annotations

import numpy as np
import pytest

from recap.diffusion import (
    DiffusionConfig,
    alpha_bars,
    betas,
    diffusion_loss,
    head_param_spec,
    init_head_params,
    sample_token,
    sample_tokens,
    timestep_embedding,
)
from recap.rng import RandomStream


def _random_head(config, seed, scale=0.05):
    arr = init_head_params(config, RandomStream(seed), dtype=np.float64)
    s = RandomStream(seed + 1)
    for k in arr:
        arr[k] = arr[k] + scale * s.child(k).normals(arr[k].shape)
    return arr


def test_beta_schedule_shape_and_range():
    cfg = DiffusionConfig(token_dim=4)
    b = betas(cfg)
    assert b.shape == (64,)
    assert np.all(b > 0) and np.all(b < 1)
    assert np.all(np.diff(b) > 0)


def test_alpha_bar_destroys_signal():
    cfg = DiffusionConfig(token_dim=4)
    ab = alpha_bars(cfg)
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[cfg.t_d] < 0.01


def test_custom_beta_endpoints():
    cfg = DiffusionConfig(token_dim=2, t_d=10, beta_start=0.01, beta_end=0.2)
    b = betas(cfg)
    assert b[0] == pytest.approx(0.01)
    assert b[-1] == pytest.approx(0.2)


def test_invalid_beta_range_rejected():
    cfg = DiffusionConfig(token_dim=2, t_d=4, beta_start=0.5, beta_end=1.5)
    with pytest.raises(ValueError, match="betas"):
        betas(cfg)


def test_timestep_embedding_shape_and_determinism():
    cfg = DiffusionConfig(token_dim=2, t_embed_dim=8)
    e = timestep_embedding(cfg, np.array([1, 17, 64]))
    assert e.shape == (3, 8)
    assert np.array_equal(e, timestep_embedding(cfg, np.array([1, 17, 64])))
    # sin/cos pairs stay on the unit circle
    assert np.allclose(e[:, :4] ** 2 + e[:, 4:] ** 2, 1.0)


def test_head_spec_final_layer_is_zero_initialized():
    cfg = DiffusionConfig(token_dim=3, hidden=(8, 8))
    spec = dict((name, kind) for name, _, kind in head_param_spec(cfg))
    assert spec["dhead.w2"] == "zeros"
    assert spec["dhead.b2"] == "zeros"
    arr = init_head_params(cfg, RandomStream(0))
    assert np.all(arr["dhead.w2"] == 0)
    assert np.any(arr["dhead.w0"] != 0)


def test_zero_head_loss_is_token_dim():
    # eps_hat = 0 at init, so the loss is ||eps||^2 with mean token_dim
    cfg = DiffusionConfig(token_dim=6)
    arr = init_head_params(cfg, RandomStream(4), dtype=np.float64)
    z = RandomStream(5).normals((10_000, 6))
    x = RandomStream(6).normals((10_000, 6))
    loss, _ = diffusion_loss(arr, cfg, z, x, RandomStream(8))
    assert loss == pytest.approx(6.0, rel=0.05)


def test_loss_nonnegative_and_shapes():
    cfg = DiffusionConfig(token_dim=3, hidden=(8,), t_embed_dim=4)
    arr = _random_head(cfg, 10)
    z = RandomStream(11).normals((5, 3))
    x = RandomStream(12).normals((5, 3))
    loss, grads = diffusion_loss(arr, cfg, z, x, RandomStream(13))
    assert loss >= 0
    assert grads["z"].shape == (5, 3)
    for name, shape, _ in head_param_spec(cfg):
        assert grads[name].shape == shape


def test_loss_shape_mismatch_rejected():
    cfg = DiffusionConfig(token_dim=3)
    arr = init_head_params(cfg, RandomStream(0), dtype=np.float64)
    with pytest.raises(ValueError):
        diffusion_loss(arr, cfg, np.zeros((2, 3)), np.zeros((2, 4)), RandomStream(1))


def test_gradients_match_finite_differences():
    cfg = DiffusionConfig(token_dim=4, hidden=(12, 12), t_embed_dim=8)
    arr = _random_head(cfg, 20)
    z = RandomStream(21).normals((4, 4))
    x = RandomStream(22).normals((4, 4))
    stream = RandomStream(23)
    _, grads = diffusion_loss(arr, cfg, z, x, stream)
    h = 1e-5

    worst = 0.0
    probe = RandomStream(24)
    for name in arr:
        flat = arr[name].reshape(-1)
        picks = (probe.child(name).uniforms(3) * flat.size).astype(int)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            lp, _ = diffusion_loss(arr, cfg, z, x, stream)
            flat[idx] = orig - h
            lm, _ = diffusion_loss(arr, cfg, z, x, stream)
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            got = grads[name].reshape(-1)[idx]
            worst = max(worst, abs(fd - got) / max(abs(fd), 1e-8))
    assert worst < 1e-4

    # gradient with respect to z, same recipe
    for r, c in [(0, 1), (2, 3), (3, 0)]:
        zp = z.copy()
        zp[r, c] += h
        lp, _ = diffusion_loss(arr, cfg, zp, x, stream)
        zp[r, c] -= 2 * h
        lm, _ = diffusion_loss(arr, cfg, zp, x, stream)
        fd = (lp - lm) / (2 * h)
        rel = abs(fd - grads["z"][r, c]) / max(abs(fd), 1e-8)
        assert rel < 1e-4


def _trained_constant_head():
    cfg = DiffusionConfig(token_dim=2, hidden=(32, 32), t_embed_dim=8)
    arr = init_head_params(cfg, RandomStream(40), dtype=np.float64)
    c = np.array([0.7, -0.4])
    z = RandomStream(41).normals((2,))
    batch = 256
    zb = np.tile(z, (batch, 1))
    xb = np.tile(c, (batch, 1))
    vel = {k: np.zeros_like(v) for k, v in arr.items()}
    for it in range(1500):
        keys = it * batch + np.arange(batch)
        _, g = diffusion_loss(arr, cfg, zb, xb, RandomStream(99), keys=keys)
        for k in arr:
            vel[k] = 0.9 * vel[k] + g[k]
            arr[k] = arr[k] - 0.02 * vel[k]
    return cfg, arr, c, z


def test_trained_head_samples_near_target_and_strided_consistency():
    cfg, arr, c, z = _trained_constant_head()
    zs = np.tile(z, (1000, 1))
    full = sample_tokens(arr, cfg, zs, cfg.t_d, RandomStream(123))
    assert np.max(np.abs(full.mean(axis=0) - c)) < 0.1
    half = sample_tokens(arr, cfg, zs, cfg.t_d // 2, RandomStream(123))
    assert np.max(np.abs(full.mean(axis=0) - half.mean(axis=0))) < 0.05


def test_sample_token_shape_and_reproducibility():
    cfg = DiffusionConfig(token_dim=3, hidden=(8,), t_embed_dim=4, t_d=16)
    arr = _random_head(cfg, 30)
    z = RandomStream(31).normals((3,))
    a = sample_token(arr, cfg, z, 16, RandomStream(32))
    b = sample_token(arr, cfg, z, 16, RandomStream(32))
    assert a.shape == (3,)
    assert np.array_equal(a, b)


def test_sample_keys_make_batch_composition_irrelevant():
    cfg = DiffusionConfig(token_dim=2, hidden=(8,), t_embed_dim=4, t_d=8)
    arr = _random_head(cfg, 33)
    z = RandomStream(34).normals((4, 2))
    full = sample_tokens(arr, cfg, z, 8, RandomStream(35), keys=np.arange(4))
    solo = sample_tokens(arr, cfg, z[2:3], 8, RandomStream(35), keys=np.array([2]))
    assert np.array_equal(full[2], solo[0])


def test_sample_steps_out_of_range():
    cfg = DiffusionConfig(token_dim=2, t_d=8)
    arr = init_head_params(cfg, RandomStream(0), dtype=np.float64)
    with pytest.raises(ValueError, match="steps"):
        sample_tokens(arr, cfg, np.zeros((1, 2)), 9, RandomStream(1))
    with pytest.raises(ValueError, match="steps"):
        sample_tokens(arr, cfg, np.zeros((1, 2)), 0, RandomStream(1))
