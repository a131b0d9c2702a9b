"""Self-contained verification checks runnable from the command line.

Five checks cover the load-bearing numerics: partial forwards against a
frozen-context oracle reimplemented here from scratch, the zero-local
decoding degeneracy, the schedule count tables, Gumbel-Top-k set frequencies
against exhaustive enumeration, and finite-difference gradient agreement.
Each check returns a CheckResult; run_verification prints one line per check
and the caller maps any failure to a nonzero exit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import erf
from scipy.stats import chisquare

from .data import SyntheticDatasetSpec, generate_dataset
from .diffusion import DiffusionConfig, diffusion_loss, init_head_params
from .grads import discrete_loss_and_grads
from .grid import TokenGrid
from .kvcache import build_cache
from .model import ModelConfig, forward_full, forward_partial, init_params
from .pipeline import SamplerConfig, TrainConfig, decode_baseline, decode_recap, train_model
from .rng import RandomStream
from .sampler import ConfidenceTable, gumbel_top_k
from .schedule import build_grouped_schedule, cosine_schedule, polynomial_schedule

__all__ = ["CheckResult", "run_verification"]


@dataclass(frozen=True)
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    elapsed_s: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"criterion {self.criterion} ({self.name}): {status} - {self.detail} [{self.elapsed_s:.1f}s]"


# independent forward oracle (vectorized, double precision) ---------------------


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _attention(q, k, v, heads):
    n, d = q.shape
    dk = d // heads
    out = np.empty((n, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        out[:, sl] = p @ v[:, sl]
    return out


def _block(g, pfx, x, heads):
    h = _ln(x, g[f"{pfx}.ln1_g"], g[f"{pfx}.ln1_b"])
    q = h @ g[f"{pfx}.wq"] + g[f"{pfx}.bq"]
    k = h @ g[f"{pfx}.wk"] + g[f"{pfx}.bk"]
    v = h @ g[f"{pfx}.wv"] + g[f"{pfx}.bv"]
    x = x + _attention(q, k, v, heads) @ g[f"{pfx}.wo"] + g[f"{pfx}.bo"]
    h2 = _ln(x, g[f"{pfx}.ln2_g"], g[f"{pfx}.ln2_b"])
    return x + _gelu(h2 @ g[f"{pfx}.mlp_w1"] + g[f"{pfx}.mlp_b1"]) @ g[f"{pfx}.mlp_w2"] + g[f"{pfx}.mlp_b2"]


def _tok_rows(g, grid, positions):
    if grid.continuous:
        return grid.vecs[positions].astype(np.float64) @ g["in_proj_w"] + g["in_proj_b"]
    return g["tok_embed"][grid.ids[positions]]


def _embed(g, grid, positions, cond):
    x = np.where(
        grid.mask[positions, None],
        g["mask_embed"][None, :],
        _tok_rows(g, grid, positions),
    )
    return x + g["pos_embed"][positions] + g["cond_embed"][cond]


class _Oracle:
    """Frozen-context reference: keeps per-layer block-input matrices."""

    def __init__(self, params, grid, cond):
        self.cfg = params.config
        self.g = {k: v.astype(np.float64) for k, v in params.arrays.items()}
        g, cfg = self.g, self.cfg
        if cfg.arch == "decoder_only":
            x = _embed(g, grid, np.arange(cfg.seq_len), cond)
            self.dec = []
            for layer in range(cfg.layers):
                self.dec.append(x.copy())
                x = _block(g, f"dec{layer}", x, cfg.heads)
        else:
            unmasked = grid.unmasked_positions()
            xe = np.concatenate(
                [g["cond_embed"][cond][None, :],
                 _tok_rows(g, grid, unmasked) + g["pos_embed"][unmasked]]
            )
            self.enc = []
            for layer in range(cfg.layers):
                self.enc.append(xe.copy())
                xe = _block(g, f"enc{layer}", xe, cfg.heads)
            eo = _ln(xe, g["enc_final_ln_g"], g["enc_final_ln_b"])
            xd = np.tile(g["mask_embed"], (1 + cfg.seq_len, 1))
            xd[1:] += g["pos_embed"]
            xd[0] = eo[0]
            xd[1 + unmasked] = eo[1:] + g["pos_embed"][unmasked]
            self.dec = []
            for layer in range(cfg.decoder_layers):
                self.dec.append(xd.copy())
                xd = _block(g, f"dec{layer}", xd, cfg.heads)

    def partial(self, grid, targets, cond):
        g, cfg = self.g, self.cfg
        if cfg.arch == "decoder_only":
            x = _embed(g, grid, targets, cond)
            slots = targets
        else:
            newly = targets[~grid.mask[targets]]
            if len(newly):
                xe = _tok_rows(g, grid, newly) + g["pos_embed"][newly]
                for layer in range(cfg.layers):
                    self.enc[layer] = np.concatenate([self.enc[layer], xe])
                    xe = _block(g, f"enc{layer}", self.enc[layer].copy(), cfg.heads)[-len(newly):]
                eo = _ln(xe, g["enc_final_ln_g"], g["enc_final_ln_b"])
            x = np.tile(g["mask_embed"], (len(targets), 1)) + g["pos_embed"][targets]
            fresh = ~grid.mask[targets]
            if fresh.any():
                x[fresh] = eo + g["pos_embed"][targets[fresh]]
            slots = targets + 1
        for layer, pfx in enumerate(f"dec{i}" for i in range(len(self.dec))):
            self.dec[layer][slots] = x
            x = _block(g, pfx, self.dec[layer].copy(), cfg.heads)[slots]
        return _ln(x, g["final_ln_g"], g["final_ln_b"]) @ g["head_w"] + g["head_b"]


def _perturbed(config, stream, dtype=np.float64, scale=0.05):
    params = init_params(config, stream.child("init")).astype(dtype)
    for name in params.arrays:
        bump = scale * stream.child("bump", name).normals(params.arrays[name].shape)
        params.arrays[name] = (params.arrays[name] + bump).astype(dtype)
    return params


def _rel_err(got, want):
    scale = max(float(np.max(np.abs(want))), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(got - want))) / scale


def check_frozen_context(seed: int) -> CheckResult:
    t0 = time.perf_counter()
    master = RandomStream(seed).child("frozen")
    worst32 = worst64 = 0.0
    for idx in range(50):
        s = master.child("inst", idx)
        u = s.child("knobs").uniforms(8)
        heads = 2 if u[0] < 0.5 else 4
        d = heads * (2 + int(u[1] * (64 // heads - 1)))
        n = 8 + int(u[2] * 25)
        layers = 1 + int(u[3] * 4)
        enc_dec = idx % 4 == 3
        continuous = idx % 5 == 4
        kw = dict(seq_len=n, embed_dim=d, heads=heads, layers=layers,
                  num_conditions=1 + int(u[4] * 3))
        if enc_dec:
            kw.update(arch="encoder_decoder", decoder_layers=1 + int(u[5] * 2))
        if continuous:
            kw.update(token_mode="continuous", token_dim=3 + int(u[6] * 4))
        else:
            kw.update(vocab=5 + int(u[6] * 8))
        cfg = ModelConfig(**kw)
        cond = int(u[7] * cfg.num_conditions)

        for dtype, bound in ((np.float64, 1e-10), (np.float32, 1e-5)):
            params = _perturbed(cfg, s.child("params"), dtype)
            grid = TokenGrid.all_masked(
                n, condition=cond,
                token_dim=cfg.token_dim if continuous else None, dtype=dtype,
            )
            vis = np.flatnonzero(s.child("vis").uniforms_at(np.arange(n)) < 0.4)
            if enc_dec and len(vis) == 0:
                vis = np.array([0])
            if len(vis) == n:
                vis = vis[:-1]
            if len(vis):
                if continuous:
                    grid.commit(vis, s.child("visvals").normals((len(vis), cfg.token_dim)).astype(dtype))
                else:
                    grid.commit(vis, (s.child("visvals").uniforms_at(vis) * cfg.vocab).astype(np.int64))
            rec = forward_full(params, grid, condition=cond)
            masked = grid.masked_positions()
            k = 1 + int(s.child("tsize").uniform() * min(8, len(masked)) - 1e-9)
            k = min(k, len(masked))
            picks = np.argsort(s.child("tpick").uniforms_at(masked), kind="stable")[:k]
            targets = np.sort(masked[picks])
            cache = build_cache(rec, targets)
            oracle = _Oracle(params, grid, cond)

            done = targets[: k // 2]
            g2 = grid.copy()
            if len(done):
                if continuous:
                    g2.commit(done, s.child("vals").normals((len(done), cfg.token_dim)).astype(dtype))
                else:
                    g2.commit(done, (s.child("vals").uniforms_at(done) * cfg.vocab).astype(np.int64))
            got = forward_partial(params, g2, targets, cache).outputs
            want = oracle.partial(g2, targets, cond)
            rel = _rel_err(got.astype(np.float64), want)
            if dtype is np.float64:
                worst64 = max(worst64, rel)
            else:
                worst32 = max(worst32, rel)
    passed = worst32 < 1e-5 and worst64 < 1e-10
    detail = f"50 instances, worst rel err {worst32:.2e} (f32, bound 1e-5), {worst64:.2e} (f64, bound 1e-10)"
    return CheckResult(1, "frozen-context equivalence", passed, detail, time.perf_counter() - t0)


def _quick_toy(seed: int):
    spec = SyntheticDatasetSpec(side=4, vocab=4, num_classes=2)
    data = generate_dataset(spec, 128, RandomStream(seed).child("data"))
    config = ModelConfig(seq_len=16, embed_dim=32, heads=2, layers=2,
                         arch="decoder_only", token_mode="discrete", vocab=4,
                         num_conditions=2)
    params = init_params(config, RandomStream(seed).child("init"))
    tcfg = TrainConfig(batch_size=32, learning_rate=0.05, momentum=0.8)
    params, _ = train_model(params, data, tcfg, epochs=10, stream=RandomStream(seed).child("train"))
    return params, spec


def check_zero_local_degeneracy(seed: int) -> CheckResult:
    t0 = time.perf_counter()
    params, _ = _quick_toy(seed)
    base = cosine_schedule(5, 16)
    grouped = build_grouped_schedule(5, 0, None, base)
    scfg = SamplerConfig(selector="confidence")
    mismatches = 0
    for s in range(20):
        ga, _ = decode_baseline(params, base, scfg, s % 2, RandomStream(1000 + s))
        gb, _ = decode_recap(params, grouped, scfg, s % 2, RandomStream(1000 + s))
        same = np.array_equal(ga.ids, gb.ids) and [
            (i, p.tolist()) for i, p in ga.history
        ] == [(i, p.tolist()) for i, p in gb.history]
        mismatches += 0 if same else 1
    passed = mismatches == 0
    detail = f"20 seeds on a trained toy model, {mismatches} grid mismatches"
    return CheckResult(2, "zero-local degeneracy", passed, detail, time.perf_counter() - t0)


def check_schedule_tables(seed: int) -> CheckResult:
    t0 = time.perf_counter()
    problems = []
    cos = list(cosine_schedule(8, 256).decode_counts)
    if cos != [5, 15, 24, 31, 39, 45, 48, 49]:
        problems.append(f"cosine 8/256 counts {cos}")
    poly = list(polynomial_schedule(4, 100).decode_counts)
    if poly != [4, 14, 31, 51]:
        problems.append(f"polynomial 4/100 counts {poly}")
    g1 = build_grouped_schedule(12, 4, 8, cosine_schedule(16, 256))
    if len(g1.substeps) != 16 or g1.u != 8:
        problems.append(f"grouped (12,4,u=8) has {len(g1.substeps)} sub-steps, u={g1.u}")
    g2 = build_grouped_schedule(15, 5, 10, cosine_schedule(20, 256))
    if len(g2.substeps) != 20 or g2.u != 10:
        problems.append(f"grouped (15,5,u=10) has {len(g2.substeps)} sub-steps, u={g2.u}")
    passed = not problems
    detail = "; ".join(problems) if problems else "cosine 8/256, polynomial 4/100, grouped 12+4 and 15+5 all exact"
    return CheckResult(3, "schedule tables", passed, detail, time.perf_counter() - t0)


def check_gumbel_top_k(seed: int) -> CheckResult:
    t0 = time.perf_counter()
    positions = np.arange(4)
    scores = np.array([-0.1, -0.6, -1.3, -2.2])
    tau2 = 1.5
    table = ConfidenceTable(positions=positions, scores=scores)
    draws = 200_000
    stream = RandomStream(seed).child("gumbel")
    counts = {frozenset(pair): 0 for pair in combinations(range(4), 2)}
    for i in range(draws):
        picked = gumbel_top_k(table, tau2, 2, stream.child(i))
        counts[frozenset(int(p) for p in picked)] += 1
    p = np.exp(scores / tau2)
    p /= p.sum()
    expected = {}
    for i, j in combinations(range(4), 2):
        expected[frozenset((i, j))] = p[i] * p[j] / (1 - p[i]) + p[j] * p[i] / (1 - p[j])
    keys = sorted(counts, key=sorted)
    obs = np.array([counts[k] for k in keys], dtype=np.float64)
    exp = np.array([expected[k] for k in keys]) * draws
    stat, pval = chisquare(obs, exp)
    passed = bool(pval > 0.01)
    detail = f"chi-square p={pval:.3f} over {draws} draws (needs > 0.01)"
    return CheckResult(4, "gumbel-top-k frequencies", passed, detail, time.perf_counter() - t0)


def _fd_worst(arrays, loss_fn, stream, probes=2, h=1e-4):
    # h = 1e-4 keeps the central-difference roundoff floor (eps * |L| / h)
    # near 1e-12 so that even entries at the 1e-6 denominator floor resolve
    # well inside the 1e-4 bound; truncation error stays O(h^2)
    worst = 0.0
    _, grads = loss_fn()
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        picks = (stream.child("probe", name).uniforms(probes) * flat.size).astype(np.int64)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up, _ = loss_fn()
            flat[idx] = orig - h
            dn, _ = loss_fn()
            flat[idx] = orig
            fd = (up - dn) / (2 * h)
            an = float(grads[name].reshape(-1)[idx])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def check_gradients(seed: int) -> CheckResult:
    t0 = time.perf_counter()
    stream = RandomStream(seed).child("grad")

    cfg = ModelConfig(seq_len=8, embed_dim=16, heads=2, layers=2, vocab=7,
                      num_conditions=3)
    params = _perturbed(cfg, stream.child("dparams"))
    tokens = (stream.child("tok").uniforms(4 * 8).reshape(4, 8) * 7).astype(np.int64)
    mask = stream.child("mask").uniforms(4 * 8).reshape(4, 8) < 0.5
    mask[:, 3] = True
    mask[:, 5] = False
    conds = (stream.child("cond").uniforms(4) * 3).astype(np.int64)
    worst_ce = _fd_worst(
        params.arrays, lambda: discrete_loss_and_grads(params, tokens, mask, conds),
        stream.child("fd1"),
    )

    dcfg = DiffusionConfig(token_dim=4, t_d=8, hidden=(12,), t_embed_dim=4)
    head = init_head_params(dcfg, stream.child("hinit"))
    for name in head:
        bump = 0.05 * stream.child("hbump", name).normals(head[name].shape)
        head[name] = head[name].astype(np.float64) + bump
    z = stream.child("z").normals((6, 4))
    x = stream.child("x").normals((6, 4))
    keys = np.arange(6)

    def head_loss():
        return diffusion_loss(head, dcfg, z, x, stream.child("noise"), keys)

    worst_dh = _fd_worst(head, head_loss, stream.child("fd2"))
    passed = worst_ce < 1e-4 and worst_dh < 1e-4
    detail = f"worst rel err {worst_ce:.2e} (cross-entropy), {worst_dh:.2e} (diffusion head); bound 1e-4"
    return CheckResult(5, "finite-difference gradients", passed, detail, time.perf_counter() - t0)


_CHECKS = [
    check_frozen_context,
    check_zero_local_degeneracy,
    check_schedule_tables,
    check_gumbel_top_k,
    check_gradients,
]


def run_verification(seed: int = 0, report=print) -> list[CheckResult]:
    """Run all five checks, print one line each, return the results."""
    results = []
    for check in _CHECKS:
        result = check(seed)
        results.append(result)
        if report is not None:
            report(result.line())
    return results
