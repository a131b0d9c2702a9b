"""Synthetic token-grid datasets with exactly computable statistics.

Two generators over sqrt(N) x sqrt(N) grids:

* checkerboard_markov: token = 2 * color + parity. Parity follows a
  class-offset checkerboard, colors follow a per-row Markov chain
  (stay probability 0.85). Horizontally adjacent cells therefore always
  disagree in parity and usually agree in color.
* blockwise_palette: 2x2-constant blocks whose values are drawn uniformly
  from a per-class palette; palettes are disjoint contiguous vocabulary
  chunks.

Each cell is independently corrupted with probability `noise_rate` by a
uniform random token. Because the generators are this simple, the
horizontal-neighbor co-occurrence table has a closed form, which is the
oracle the quality metric compares decoded samples against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RandomStream

__all__ = [
    "SyntheticDatasetSpec",
    "Dataset",
    "generate_dataset",
    "analytic_cooccurrence",
    "empirical_cooccurrence",
    "parity_agreement",
    "make_codebook",
    "quantize_to_codebook",
    "save_dataset_jsonl",
    "load_dataset_jsonl",
]

STAY_PROB = 0.85


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    side: int
    vocab: int
    generator: str = "checkerboard_markov"
    num_classes: int = 2
    noise_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.side < 2:
            raise ValueError(f"side must be >= 2, got {self.side}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError(f"noise_rate must be in [0, 0.5), got {self.noise_rate}")
        if self.generator == "checkerboard_markov":
            if self.vocab < 2 or self.vocab % 2 != 0:
                raise ValueError("checkerboard_markov needs an even vocab >= 2")
        elif self.generator == "blockwise_palette":
            if self.side % 2 != 0:
                raise ValueError("blockwise_palette needs an even side")
            if self.vocab < self.num_classes:
                raise ValueError("blockwise_palette needs vocab >= num_classes")
        else:
            raise ValueError(f"unknown generator {self.generator!r}")

    @property
    def seq_len(self) -> int:
        return self.side * self.side

    @property
    def colors(self) -> int:
        return self.vocab // 2

    @property
    def palette_size(self) -> int:
        return self.vocab // self.num_classes

    def palette(self, cls: int) -> np.ndarray:
        start = cls * self.palette_size
        return np.arange(start, start + self.palette_size, dtype=np.int64)


@dataclass
class Dataset:
    spec: SyntheticDatasetSpec
    tokens: np.ndarray  # (count, N) int64
    classes: np.ndarray  # (count,) int64
    vecs: np.ndarray | None = None  # (count, N, token_dim) when continuous

    def __len__(self) -> int:
        return len(self.tokens)

    def with_codebook(self, book: np.ndarray) -> "Dataset":
        """Attach continuous token vectors by looking ids up in a codebook."""
        return Dataset(self.spec, self.tokens, self.classes, vecs=book[self.tokens])


def _cell_keys(count: int, n: int) -> np.ndarray:
    return np.arange(count * n, dtype=np.int64).reshape(count, n)


def generate_dataset(spec: SyntheticDatasetSpec, count: int, stream: RandomStream) -> Dataset:
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    side, n = spec.side, spec.seq_len
    classes = (stream.child("class").uniforms_at(np.arange(count)) * spec.num_classes).astype(
        np.int64
    )

    if spec.generator == "checkerboard_markov":
        m = spec.colors
        keys = _cell_keys(count, n).reshape(count, side, side)
        u = stream.child("color").uniforms_at(keys)
        colors = np.empty((count, side, side), dtype=np.int64)
        colors[:, :, 0] = (u[:, :, 0] * m).astype(np.int64)
        for j in range(1, side):
            prev = colors[:, :, j - 1]
            if m == 1:
                colors[:, :, j] = prev
                continue
            stay = u[:, :, j] < STAY_PROB
            # rescale the leftover mass to pick uniformly among the other colors
            other = ((u[:, :, j] - STAY_PROB) / (1.0 - STAY_PROB) * (m - 1)).astype(np.int64)
            other = np.minimum(other, m - 2)
            other += (other >= prev).astype(np.int64)
            colors[:, :, j] = np.where(stay, prev, other)
        i_idx = np.arange(side)[:, None]
        j_idx = np.arange(side)[None, :]
        parity = (i_idx + j_idx + classes[:, None, None]) % 2
        tokens = (2 * colors + parity).reshape(count, n)
    else:
        b = side // 2
        block_keys = np.arange(count * b * b, dtype=np.int64).reshape(count, b, b)
        u = stream.child("block").uniforms_at(block_keys)
        idx = (u * spec.palette_size).astype(np.int64)
        values = classes[:, None, None] * spec.palette_size + idx
        tokens = np.repeat(np.repeat(values, 2, axis=1), 2, axis=2).reshape(count, n)

    if spec.noise_rate > 0.0:
        keys = _cell_keys(count, n)
        hit = stream.child("noise").uniforms_at(keys) < spec.noise_rate
        repl = (stream.child("noise_tok").uniforms_at(keys) * spec.vocab).astype(np.int64)
        tokens = np.where(hit, repl, tokens)

    return Dataset(spec=spec, tokens=tokens, classes=classes)


# analytic statistics ----------------------------------------------------------


def _noise_kernel(spec: SyntheticDatasetSpec) -> np.ndarray:
    eta, v = spec.noise_rate, spec.vocab
    return (1.0 - eta) * np.eye(v) + eta / v


def analytic_cooccurrence(spec: SyntheticDatasetSpec) -> np.ndarray:
    """Exact distribution of ordered horizontal-neighbor token pairs.

    Aggregated over a uniform class prior and all grid positions, with cell
    noise applied. Rows index the left token, columns the right token; the
    table sums to 1.
    """
    v, side, c_n = spec.vocab, spec.side, spec.num_classes
    base = np.zeros((v, v))
    if spec.generator == "checkerboard_markov":
        m = spec.colors
        if m > 1:
            trans = np.full((m, m), (1.0 - STAY_PROB) / (m - 1))
            np.fill_diagonal(trans, STAY_PROB)
        else:
            trans = np.ones((1, 1))
        pair_colors = trans / m  # P(ca = k, cb = l), stationary chain
        for cls in range(c_n):
            for i in range(side):
                for j in range(side - 1):
                    pa = (i + j + cls) % 2
                    a = 2 * np.arange(m) + pa
                    b = 2 * np.arange(m) + (1 - pa)
                    base[np.ix_(a, b)] += pair_colors
        base /= c_n * side * (side - 1)
    else:
        ps = spec.palette_size
        within = (side // 2) / (side - 1)
        across = (side // 2 - 1) / (side - 1)
        for cls in range(c_n):
            pal = spec.palette(cls)
            base[pal, pal] += within / (c_n * ps)
            base[np.ix_(pal, pal)] += across / (c_n * ps * ps)
    k = _noise_kernel(spec)
    return k.T @ base @ k


def empirical_cooccurrence(tokens: np.ndarray, spec: SyntheticDatasetSpec) -> np.ndarray:
    """Observed ordered horizontal-neighbor pair frequencies, summing to 1."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, spec.side, spec.side)
    left = tokens[:, :, :-1].reshape(-1)
    right = tokens[:, :, 1:].reshape(-1)
    table = np.zeros((spec.vocab, spec.vocab))
    np.add.at(table, (left, right), 1.0)
    return table / table.sum()


def parity_agreement(tokens: np.ndarray, spec: SyntheticDatasetSpec) -> float:
    """Fraction of horizontal neighbors with equal token parity.

    The noise-free checkerboard generator alternates parity every column, so
    this is exactly 0 there; uniform-random grids sit near 0.5.
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, spec.side, spec.side)
    same = (tokens[:, :, :-1] % 2) == (tokens[:, :, 1:] % 2)
    return float(same.mean())


# continuous-mode codebook ------------------------------------------------------


def make_codebook(vocab: int, token_dim: int, stream: RandomStream) -> np.ndarray:
    """(vocab, token_dim) unit-norm rows; the continuous stand-in for token ids."""
    book = stream.child("codebook").normals((vocab, token_dim))
    return book / np.linalg.norm(book, axis=1, keepdims=True)


def quantize_to_codebook(vecs: np.ndarray, book: np.ndarray) -> np.ndarray:
    """Nearest-codebook-row ids (Euclidean), shape = vecs.shape[:-1]."""
    vecs = np.asarray(vecs)
    flat = vecs.reshape(-1, vecs.shape[-1])
    d2 = (flat * flat).sum(1)[:, None] - 2.0 * flat @ book.T + (book * book).sum(1)[None, :]
    return np.argmin(d2, axis=1).reshape(vecs.shape[:-1]).astype(np.int64)


# JSON-lines IO -----------------------------------------------------------------


def save_dataset_jsonl(dataset: Dataset, path: str | Path) -> None:
    """One object per grid: {"tokens": [int or [float,...]], "class": int}."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            if dataset.vecs is not None:
                toks = [[float(x) for x in row] for row in dataset.vecs[i]]
            else:
                toks = [int(t) for t in dataset.tokens[i]]
            fh.write(json.dumps({"tokens": toks, "class": int(dataset.classes[i])}) + "\n")


def load_dataset_jsonl(path: str | Path, spec: SyntheticDatasetSpec) -> Dataset:
    path = Path(path)
    tokens, classes, vec_rows = [], [], []
    continuous = False
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            row = obj["tokens"]
            if len(row) != spec.seq_len:
                raise ValueError(
                    f"grid of length {len(row)} does not match spec seq_len {spec.seq_len}"
                )
            if row and isinstance(row[0], list):
                continuous = True
                vec_rows.append(np.asarray(row, dtype=np.float64))
            else:
                tokens.append(np.asarray(row, dtype=np.int64))
            classes.append(int(obj["class"]))
    if continuous:
        vecs = np.stack(vec_rows)
        ids = np.zeros(vecs.shape[:2], dtype=np.int64)
        return Dataset(spec, ids, np.asarray(classes, dtype=np.int64), vecs=vecs)
    return Dataset(spec, np.stack(tokens), np.asarray(classes, dtype=np.int64))
