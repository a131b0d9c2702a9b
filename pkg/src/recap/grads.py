"""Hand-derived training gradients for both architectures.

No autodiff: the forward pass stashes every intermediate the chain rule
needs, and the backward pass applies the textbook derivatives (layer norm
with population variance, softmax attention, exact GELU). The decoder-only
path is batched; the encoder-decoder path runs per example because each
example's encoder active set has its own length.

Discrete mode trains mean masked cross-entropy; continuous mode feeds the
masked-position latents through the diffusion head and back-propagates the
head's z-gradients into the transformer.
"""

from __future__ import annotations

import numpy as np

from .diffusion import diffusion_loss
from .model import ModelParams
from .numerics import gelu, gelu_grad, log_softmax, softmax
from .rng import RandomStream

__all__ = ["discrete_loss_and_grads", "continuous_loss_and_grads"]


# layer plumbing with stashes ------------------------------------------------


def _ln_forward(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x - mu) / sigma
    return xhat * gain + bias, xhat, sigma


def _ln_backward(dy, xhat, sigma, gain):
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) / sigma
    return dx, dgain, dbias


def _split(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def _block_forward(g, pfx, x, heads):
    st = {"x_in": x}
    h1, st["xhat1"], st["sigma1"] = _ln_forward(x, g[f"{pfx}.ln1_g"], g[f"{pfx}.ln1_b"])
    st["h1"] = h1
    q = h1 @ g[f"{pfx}.wq"] + g[f"{pfx}.bq"]
    k = h1 @ g[f"{pfx}.wk"] + g[f"{pfx}.bk"]
    v = h1 @ g[f"{pfx}.wv"] + g[f"{pfx}.bv"]
    qh, kh, vh = _split(q, heads), _split(k, heads), _split(v, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    probs = softmax((qh @ kh.transpose(0, 1, 3, 2)) * scale, axis=-1)
    att = _merge(probs @ vh)
    st.update(qh=qh, kh=kh, vh=vh, probs=probs, att=att, scale=scale)
    x = x + att @ g[f"{pfx}.wo"] + g[f"{pfx}.bo"]
    st["x_mid"] = x
    h2, st["xhat2"], st["sigma2"] = _ln_forward(x, g[f"{pfx}.ln2_g"], g[f"{pfx}.ln2_b"])
    st["h2"] = h2
    m1 = h2 @ g[f"{pfx}.mlp_w1"] + g[f"{pfx}.mlp_b1"]
    st["m1"] = m1
    a = gelu(m1)
    st["a"] = a
    x = x + a @ g[f"{pfx}.mlp_w2"] + g[f"{pfx}.mlp_b2"]
    return x, st


def _mat_grad(inp, dout):
    """Weight gradient of out = inp @ w: contract all leading axes."""
    return np.tensordot(inp, dout, axes=(tuple(range(inp.ndim - 1)),) * 2)


def _block_backward(g, pfx, dx, st, heads, grads):
    axes = tuple(range(dx.ndim - 1))
    # MLP half
    grads[f"{pfx}.mlp_w2"] += _mat_grad(st["a"], dx)
    grads[f"{pfx}.mlp_b2"] += dx.sum(axis=axes)
    da = dx @ g[f"{pfx}.mlp_w2"].T
    dm1 = da * gelu_grad(st["m1"])
    grads[f"{pfx}.mlp_w1"] += _mat_grad(st["h2"], dm1)
    grads[f"{pfx}.mlp_b1"] += dm1.sum(axis=axes)
    dh2 = dm1 @ g[f"{pfx}.mlp_w1"].T
    dx_mid, dg2, db2 = _ln_backward(dh2, st["xhat2"], st["sigma2"], g[f"{pfx}.ln2_g"])
    grads[f"{pfx}.ln2_g"] += dg2
    grads[f"{pfx}.ln2_b"] += db2
    dx_mid = dx_mid + dx
    # attention half
    grads[f"{pfx}.wo"] += _mat_grad(st["att"], dx_mid)
    grads[f"{pfx}.bo"] += dx_mid.sum(axis=axes)
    datt = _split(dx_mid @ g[f"{pfx}.wo"].T, heads)
    dprobs = datt @ st["vh"].transpose(0, 1, 3, 2)
    dvh = st["probs"].transpose(0, 1, 3, 2) @ datt
    p = st["probs"]
    dscores = p * (dprobs - (dprobs * p).sum(axis=-1, keepdims=True))
    dqh = dscores @ st["kh"] * st["scale"]
    dkh = dscores.transpose(0, 1, 3, 2) @ st["qh"] * st["scale"]
    dq, dk, dv = _merge(dqh), _merge(dkh), _merge(dvh)
    grads[f"{pfx}.wq"] += _mat_grad(st["h1"], dq)
    grads[f"{pfx}.bq"] += dq.sum(axis=axes)
    grads[f"{pfx}.wk"] += _mat_grad(st["h1"], dk)
    grads[f"{pfx}.bk"] += dk.sum(axis=axes)
    grads[f"{pfx}.wv"] += _mat_grad(st["h1"], dv)
    grads[f"{pfx}.bv"] += dv.sum(axis=axes)
    dh1 = dq @ g[f"{pfx}.wq"].T + dk @ g[f"{pfx}.wk"].T + dv @ g[f"{pfx}.wv"].T
    dx_in, dg1, db1 = _ln_backward(dh1, st["xhat1"], st["sigma1"], g[f"{pfx}.ln1_g"])
    grads[f"{pfx}.ln1_g"] += dg1
    grads[f"{pfx}.ln1_b"] += db1
    return dx_in + dx_mid


def _zero_grads(params: ModelParams, extra: dict[str, np.ndarray] | None = None):
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    if extra:
        grads.update({k: np.zeros_like(v) for k, v in extra.items()})
    return grads


# decoder-only (batched) ------------------------------------------------------


def _dec_only_forward(params, tokens, vecs, input_mask, conditions):
    cfg = params.config
    g = params.arrays
    if cfg.token_mode == "discrete":
        emb = g["tok_embed"][tokens]
    else:
        emb = vecs @ g["in_proj_w"] + g["in_proj_b"]
    x = np.where(input_mask[:, :, None], g["mask_embed"], emb)
    x = x + g["pos_embed"][None] + g["cond_embed"][conditions][:, None, :]
    stashes = []
    for i in range(cfg.layers):
        x, st = _block_forward(g, f"dec{i}", x, cfg.heads)
        stashes.append(st)
    hf, xhat_f, sigma_f = _ln_forward(x, g["final_ln_g"], g["final_ln_b"])
    outputs = hf @ g["head_w"] + g["head_b"]
    return outputs, (stashes, hf, xhat_f, sigma_f)

def _dec_only_backward(params, tokens, vecs, input_mask, conditions, doutputs, stash, grads):
    cfg = params.config
    g = params.arrays
    stashes, hf, xhat_f, sigma_f = stash
    grads["head_w"] += _mat_grad(hf, doutputs)
    grads["head_b"] += doutputs.sum(axis=(0, 1))
    dhf = doutputs @ g["head_w"].T
    dx, dgf, dbf = _ln_backward(dhf, xhat_f, sigma_f, g["final_ln_g"])
    grads["final_ln_g"] += dgf
    grads["final_ln_b"] += dbf
    for i in reversed(range(cfg.layers)):
        dx = _block_backward(g, f"dec{i}", dx, stashes[i], cfg.heads, grads)
    grads["pos_embed"] += dx.sum(axis=0)
    np.add.at(grads["cond_embed"], conditions, dx.sum(axis=1))
    masked = input_mask
    grads["mask_embed"] += dx[masked].sum(axis=0)
    if cfg.token_mode == "discrete":
        np.add.at(grads["tok_embed"], tokens[~masked], dx[~masked])
    else:
        grads["in_proj_w"] += vecs[~masked].T @ dx[~masked]
        grads["in_proj_b"] += dx[~masked].sum(axis=0)


# encoder-decoder (per example) -----------------------------------------------


def _enc_dec_forward(params, tokens, vecs, input_mask, condition):
    cfg = params.config
    g = params.arrays
    unmasked = np.flatnonzero(~input_mask)
    if cfg.token_mode == "discrete":
        emb = g["tok_embed"][tokens[unmasked]]
    else:
        emb = vecs[unmasked] @ g["in_proj_w"] + g["in_proj_b"]
    x_enc = np.concatenate([g["cond_embed"][condition][None], emb + g["pos_embed"][unmasked]])
    x_enc = x_enc[None]
    enc_stashes = []
    for i in range(cfg.layers):
        x_enc, st = _block_forward(g, f"enc{i}", x_enc, cfg.heads)
        enc_stashes.append(st)
    enc_out, xhat_e, sigma_e = _ln_forward(x_enc, g["enc_final_ln_g"], g["enc_final_ln_b"])

    n = cfg.seq_len
    body = np.broadcast_to(g["mask_embed"], (n, cfg.embed_dim)).copy()
    body[unmasked] = enc_out[0, 1:]
    x_dec = np.concatenate([enc_out[0, :1], body + g["pos_embed"]])[None]
    dec_stashes = []
    for i in range(cfg.decoder_layers):
        x_dec, st = _block_forward(g, f"dec{i}", x_dec, cfg.heads)
        dec_stashes.append(st)
    hf, xhat_f, sigma_f = _ln_forward(x_dec, g["final_ln_g"], g["final_ln_b"])
    outputs = (hf @ g["head_w"] + g["head_b"])[0, 1:]
    stash = (unmasked, enc_stashes, xhat_e, sigma_e, enc_out, dec_stashes, hf, xhat_f, sigma_f)
    return outputs, stash


def _enc_dec_backward(params, tokens, vecs, input_mask, condition, doutputs, stash, grads):
    cfg = params.config
    g = params.arrays
    unmasked, enc_stashes, xhat_e, sigma_e, enc_out, dec_stashes, hf, xhat_f, sigma_f = stash
    dout_full = np.concatenate([np.zeros((1, doutputs.shape[-1]), doutputs.dtype), doutputs])[None]
    grads["head_w"] += _mat_grad(hf, dout_full)
    grads["head_b"] += dout_full.sum(axis=(0, 1))
    dhf = dout_full @ g["head_w"].T
    dx, dgf, dbf = _ln_backward(dhf, xhat_f, sigma_f, g["final_ln_g"])
    grads["final_ln_g"] += dgf
    grads["final_ln_b"] += dbf
    for i in reversed(range(cfg.decoder_layers)):
        dx = _block_backward(g, f"dec{i}", dx, dec_stashes[i], cfg.heads, grads)
    dx = dx[0]
    grads["pos_embed"] += dx[1:]
    masked = input_mask.copy()
    grads["mask_embed"] += dx[1:][masked].sum(axis=0)
    denc_out = np.zeros_like(enc_out)
    denc_out[0, 0] = dx[0]
    denc_out[0, 1:] = dx[1:][unmasked]
    dx_enc, dge, dbe = _ln_backward(denc_out, xhat_e, sigma_e, g["enc_final_ln_g"])
    grads["enc_final_ln_g"] += dge
    grads["enc_final_ln_b"] += dbe
    for i in reversed(range(cfg.layers)):
        dx_enc = _block_backward(g, f"enc{i}", dx_enc, enc_stashes[i], cfg.heads, grads)
    dx_enc = dx_enc[0]
    grads["cond_embed"][condition] += dx_enc[0]
    grads["pos_embed"][unmasked] += dx_enc[1:]
    if cfg.token_mode == "discrete":
        np.add.at(grads["tok_embed"], tokens[unmasked], dx_enc[1:])
    else:
        grads["in_proj_w"] += vecs[unmasked].T @ dx_enc[1:]
        grads["in_proj_b"] += dx_enc[1:].sum(axis=0)


# losses ----------------------------------------------------------------------


def _check_batch(params, values, input_mask, conditions):
    cfg = params.config
    if values.ndim < 2 or values.shape[1] != cfg.seq_len:
        raise ValueError(f"batch shaped {values.shape} does not match seq_len {cfg.seq_len}")
    if input_mask.shape[:2] != values.shape[:2]:
        raise ValueError("input_mask shape does not match the batch")
    if np.any(input_mask.sum(axis=1) == 0):
        raise ValueError("every example needs at least one masked position")
    if len(conditions) != len(values):
        raise ValueError("one condition per example required")


def discrete_loss_and_grads(
    params: ModelParams,
    tokens: np.ndarray,
    input_mask: np.ndarray,
    conditions: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean masked cross-entropy and exact gradients.

    tokens (B, N) are ground-truth ids; input_mask (B, N) marks positions
    hidden from the model (and scored). The loss is the per-example mean
    over masked positions, averaged over the batch.
    """
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    input_mask = np.asarray(input_mask, dtype=bool)
    conditions = np.asarray(conditions, dtype=np.int64)
    _check_batch(params, tokens, input_mask, conditions)
    b = len(tokens)
    grads = _zero_grads(params)
    per_example = 1.0 / input_mask.sum(axis=1)

    if cfg.arch == "decoder_only":
        logits, stash = _dec_only_forward(params, tokens, None, input_mask, conditions)
        logp = log_softmax(logits.astype(np.float64), axis=-1)
        picked = np.take_along_axis(logp, tokens[..., None], axis=-1)[..., 0]
        loss = float(np.mean((-picked * input_mask).sum(axis=1) * per_example))
        dlogits = np.exp(logp)
        np.subtract.at(dlogits, (np.arange(b)[:, None], np.arange(cfg.seq_len)[None, :], tokens), 1.0)
        dlogits *= (input_mask * per_example[:, None] / b)[..., None]
        _dec_only_backward(
            params, tokens, None, input_mask, conditions,
            dlogits.astype(logits.dtype), stash, grads,
        )
        return loss, grads

    loss = 0.0
    for e in range(b):
        logits, stash = _enc_dec_forward(params, tokens[e], None, input_mask[e], conditions[e])
        logp = log_softmax(logits.astype(np.float64), axis=-1)
        picked = logp[np.arange(cfg.seq_len), tokens[e]]
        loss += float(-(picked * input_mask[e]).sum() * per_example[e]) / b
        dlogits = np.exp(logp)
        dlogits[np.arange(cfg.seq_len), tokens[e]] -= 1.0
        dlogits *= (input_mask[e] * per_example[e] / b)[:, None]
        _enc_dec_backward(
            params, tokens[e], None, input_mask[e], conditions[e],
            dlogits.astype(logits.dtype), stash, grads,
        )
    return loss, grads


def continuous_loss_and_grads(
    params: ModelParams,
    vecs: np.ndarray,
    input_mask: np.ndarray,
    conditions: np.ndarray,
    stream: RandomStream,
    key_offset: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean masked diffusion loss; gradients flow through z into the model.

    The (t, eps) draws behind each masked token are keyed by
    key_offset + example * N + position, so a fixed (stream, key_offset)
    makes the loss a deterministic function of the parameters.
    """
    cfg = params.config
    if params.diffusion is None:
        raise ValueError("params carry no diffusion head")
    vecs = np.asarray(vecs)
    input_mask = np.asarray(input_mask, dtype=bool)
    conditions = np.asarray(conditions, dtype=np.int64)
    _check_batch(params, vecs, input_mask, conditions)
    b, n = input_mask.shape
    dcfg = params.diffusion
    head = {k: v for k, v in params.arrays.items() if k.startswith("dhead.")}
    grads = _zero_grads(params)
    per_example = 1.0 / input_mask.sum(axis=1)

    if cfg.arch == "decoder_only":
        z, stash = _dec_only_forward(params, None, vecs, input_mask, conditions)
        rows = np.nonzero(input_mask)
        keys = key_offset + rows[0] * n + rows[1]
        weights = per_example[rows[0]] / b
        loss, dgrads = diffusion_loss(
            head, dcfg, z[rows], vecs[rows], stream, keys=keys, weights=weights
        )
        for name in head:
            grads[name] += dgrads[name]
        dz = np.zeros_like(z)
        dz[rows] = dgrads["z"].astype(z.dtype)
        _dec_only_backward(params, None, vecs, input_mask, conditions, dz, stash, grads)
        return loss, grads

    loss = 0.0
    for e in range(b):
        z, stash = _enc_dec_forward(params, None, vecs[e], input_mask[e], conditions[e])
        rows = np.flatnonzero(input_mask[e])
        keys = key_offset + e * n + rows
        weights = np.full(len(rows), per_example[e] / b)
        part, dgrads = diffusion_loss(
            head, dcfg, z[rows], vecs[e][rows], stream, keys=keys, weights=weights
        )
        loss += part
        for name in head:
            grads[name] += dgrads[name]
        dz = np.zeros_like(z)
        dz[rows] = dgrads["z"].astype(z.dtype)
        _enc_dec_backward(params, None, vecs[e], input_mask[e], conditions[e], dz, stash, grads)
    return loss, grads
