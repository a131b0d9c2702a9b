"""Token grids: the per-sequence decoding state.

A grid is N token slots, each masked or carrying a committed value (a
discrete id or a continuous vector), plus the condition id and a decode
history. Decoded positions are never re-masked; `commit` enforces that.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = ["TokenGrid"]


@dataclass
class TokenGrid:
    mask: np.ndarray  # (N,) bool, True = still masked
    ids: np.ndarray | None = None  # (N,) int64, defined where unmasked
    vecs: np.ndarray | None = None  # (N, token_dim), defined where unmasked
    condition: int | None = None
    history: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @classmethod
    def all_masked(
        cls,
        length: int,
        condition: int | None = None,
        token_dim: int | None = None,
        dtype=np.float32,
    ) -> "TokenGrid":
        if token_dim is None:
            return cls(
                mask=np.ones(length, dtype=bool),
                ids=np.full(length, -1, dtype=np.int64),
                condition=condition,
            )
        return cls(
            mask=np.ones(length, dtype=bool),
            vecs=np.zeros((length, token_dim), dtype=dtype),
            condition=condition,
        )

    @classmethod
    def from_ids(cls, ids: np.ndarray, condition: int | None = None) -> "TokenGrid":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(mask=np.zeros(len(ids), dtype=bool), ids=ids.copy(), condition=condition)

    @classmethod
    def from_vecs(cls, vecs: np.ndarray, condition: int | None = None) -> "TokenGrid":
        vecs = np.asarray(vecs)
        return cls(mask=np.zeros(len(vecs), dtype=bool), vecs=vecs.copy(), condition=condition)

    def __len__(self) -> int:
        return len(self.mask)

    @property
    def continuous(self) -> bool:
        return self.vecs is not None

    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def unmasked_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    def commit(self, positions: np.ndarray, values: np.ndarray, step: int = 0) -> None:
        """Unmask `positions` with `values`; re-committing a position is an error."""
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size == 0:
            return
        if not np.all(self.mask[positions]):
            redone = positions[~self.mask[positions]]
            raise ValueError(f"positions already decoded: {redone.tolist()}")
        if self.continuous:
            self.vecs[positions] = values
        else:
            self.ids[positions] = values
        self.mask[positions] = False
        self.history.append((step, positions.copy()))

    def copy(self) -> "TokenGrid":
        return TokenGrid(
            mask=self.mask.copy(),
            ids=None if self.ids is None else self.ids.copy(),
            vecs=None if self.vecs is None else self.vecs.copy(),
            condition=self.condition,
            history=list(self.history),
        )

    def fingerprint(self) -> bytes:
        """Hash of the committed state; masked-slot storage does not leak in."""
        h = hashlib.blake2b(digest_size=16)
        h.update(b"C" if self.continuous else b"D")
        h.update(self.mask.astype(np.uint8).tobytes())
        if self.continuous:
            clean = np.where(self.mask[:, None], 0, self.vecs)
            h.update(np.ascontiguousarray(clean).tobytes())
        else:
            clean = np.where(self.mask, -1, self.ids)
            h.update(np.ascontiguousarray(clean).tobytes())
        cond = -1 if self.condition is None else int(self.condition)
        h.update(cond.to_bytes(8, "little", signed=True))
        return h.digest()
