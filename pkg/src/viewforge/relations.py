"""Positive-pair structure over a batch: the symmetric relation matrix.

Rows i and j of a batch are declared semantically related by a positive
weight at (i, j). The matrix is symmetric with a zero diagonal; losses read
it either sparsely (entry iteration) or densely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyRelation, InvalidParam


@dataclass(frozen=True)
class RelationMatrix:
    """Sparse symmetric nonnegative matrix with zero diagonal.

    ``entries`` holds each unordered pair once as (i, j, weight) with i < j;
    the mirrored entry is implied.
    """

    n: int
    entries: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        seen = set()
        for i, j, w in self.entries:
            if i == j:
                raise InvalidParam(f"relation diagonal must be zero, got entry ({i},{j})")
            if not 0 <= i < self.n or not 0 <= j < self.n:
                raise InvalidParam(f"relation entry ({i},{j}) out of range for n={self.n}")
            if i > j:
                raise InvalidParam("relation entries must be stored with i < j")
            if w < 0:
                raise InvalidParam(f"relation weight must be >= 0, got {w}")
            if (i, j) in seen:
                raise InvalidParam(f"duplicate relation entry ({i},{j})")
            seen.add((i, j))

    @classmethod
    def from_pairs(cls, n: int, pairs: Iterable[tuple[int, int]], weight: float = 1.0) -> "RelationMatrix":
        canon = sorted({(min(i, j), max(i, j)) for i, j in pairs})
        return cls(n=n, entries=tuple((i, j, weight) for i, j in canon))

    def dense(self) -> np.ndarray:
        g = np.zeros((self.n, self.n), dtype=np.float64)
        for i, j, w in self.entries:
            g[i, j] = w
            g[j, i] = w
        return g

    @property
    def nnz(self) -> int:
        return 2 * sum(1 for _, _, w in self.entries if w > 0)


def as_dense_relation(g: "RelationMatrix | np.ndarray") -> np.ndarray:
    """Accept either a RelationMatrix or an already-dense array; validate."""
    if isinstance(g, RelationMatrix):
        return g.dense()
    arr = np.asarray(g, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidParam(f"relation matrix must be square, got shape {arr.shape}")
    if not np.allclose(arr, arr.T):
        raise InvalidParam("relation matrix must be symmetric")
    if np.any(np.diag(arr) != 0):
        raise InvalidParam("relation matrix must have a zero diagonal")
    if np.any(arr < 0):
        raise InvalidParam("relation weights must be >= 0")
    return arr


def build_pair_relation(n_sources: int, views_per_source: int = 2) -> RelationMatrix:
    """Block-pair structure: the views of each source are mutually related.

    With the default two views per source, rows (2k, 2k+1) form the positive
    pair of source k and nothing else is related.
    """
    if n_sources < 1:
        raise InvalidParam(f"n_sources must be >= 1, got {n_sources}")
    if views_per_source < 2:
        raise InvalidParam(f"views_per_source must be >= 2, got {views_per_source}")
    v = views_per_source
    pairs = []
    for k in range(n_sources):
        base = k * v
        for a in range(v):
            for b in range(a + 1, v):
                pairs.append((base + a, base + b))
    return RelationMatrix.from_pairs(n_sources * v, pairs)


def split_left_right(samples: Sequence, g: "RelationMatrix | np.ndarray") -> tuple[list, list]:
    """Emit every ordered related pair exactly once as (left, right) lists.

    For each row i in ascending order, each j with G[i, j] > 0 in ascending
    order appends (samples[i], samples[j]). Output lengths equal nnz(G).
    """
    dense = as_dense_relation(g)
    n = dense.shape[0]
    if len(samples) != n:
        raise InvalidParam(f"{len(samples)} samples do not match relation of size {n}")
    left, right = [], []
    for i in range(n):
        for j in np.nonzero(dense[i] > 0)[0]:
            left.append(samples[i])
            right.append(samples[int(j)])
    if not left:
        raise EmptyRelation("relation matrix has no nonzero entries")
    return left, right
