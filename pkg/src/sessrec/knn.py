"""Exact top-k item neighbor table and candidate lookup."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import ConfigError

log = logging.getLogger(__name__)

MAGIC = 0x4E4E4D58  # "XMNN" little-endian
VERSION = 1
NN_FILE = "nn_matrix.bin"


@dataclass(frozen=True)
class NearestNeighborMatrix:
    neighbors: np.ndarray  # (no_items, k) int32, best first
    similarity: np.ndarray | None = None

    @property
    def no_items(self) -> int:
        return int(self.neighbors.shape[0])

    @property
    def k(self) -> int:
        return int(self.neighbors.shape[1])

    def row(self, item: int) -> np.ndarray:
        return self.neighbors[item]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.is_dir():
            path = path / NN_FILE
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4i", MAGIC, VERSION, self.no_items, self.k))
            fh.write(np.ascontiguousarray(self.neighbors, dtype="<i4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "NearestNeighborMatrix":
        path = Path(path)
        if path.is_dir():
            path = path / NN_FILE
        raw = path.read_bytes()
        if len(raw) < 16:
            raise ValueError(f"{path}: truncated header")
        magic, version, n, k = struct.unpack("<4i", raw[:16])
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic:#x}")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        body = np.frombuffer(raw, dtype="<i4", offset=16)
        if body.size != n * k:
            raise ValueError(f"{path}: expected {n * k} ids, found {body.size}")
        return cls(body.reshape(n, k).astype(np.int32))


def _top_k_rows(sim: np.ndarray, row_ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Best k columns per row by (similarity desc, column id asc), excluding the row's own id."""
    # quantize so that mathematically equal cosines (collinear items) tie exactly
    sim = np.round(sim, 12)
    sim[np.arange(sim.shape[0]), row_ids] = -np.inf
    out_idx = np.empty((sim.shape[0], k), dtype=np.int32)
    out_sim = np.empty((sim.shape[0], k), dtype=sim.dtype)
    # everything >= the k-th largest value is a contender; ties at the boundary need the id rule
    kth = -np.partition(-sim, k - 1, axis=1)[:, k - 1]
    for r in range(sim.shape[0]):
        cand = np.flatnonzero(sim[r] >= kth[r])
        order = np.lexsort((cand, -sim[r, cand]))[:k]
        out_idx[r] = cand[order]
        out_sim[r] = sim[r, cand[order]]
    return out_idx, out_sim


def build_matrix(embeddings: np.ndarray, k: int = 100, metric: str = "cosine",
                 block_rows: int = 1024) -> NearestNeighborMatrix:
    """Exhaustive top-k neighbors of every embedding row.

    Zero-norm rows cannot take part in cosine similarity: they never appear in
    other rows' neighbor lists and get their own neighbors by dot product.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    m = emb.shape[0]
    if not 1 <= k < m:
        raise ConfigError(f"k must satisfy 1 <= k < no_items ({m}), got {k}")
    if metric not in ("cosine", "dot"):
        raise ConfigError(f"unknown similarity metric {metric!r}")
    norms = np.linalg.norm(emb, axis=1)
    zero = norms == 0
    if metric == "cosine":
        if zero.any():
            log.warning("%d zero-norm embedding rows excluded from cosine neighbors", int(zero.sum()))
            if m - int(zero.sum()) - 1 < k:
                raise ConfigError(f"only {m - int(zero.sum())} non-zero embeddings for k={k}")
        unit = emb / np.where(zero, 1.0, norms)[:, None]
    neighbors = np.empty((m, k), dtype=np.int32)
    similarity = np.empty((m, k), dtype=np.float64)
    for start in range(0, m, block_rows):
        rows = np.arange(start, min(start + block_rows, m))
        if metric == "cosine":
            sim = unit[rows] @ unit.T
            sim[:, zero] = -np.inf
            if zero[rows].any():
                zr = zero[rows]
                sim[zr] = emb[rows[zr]] @ emb.T
        else:
            sim = emb[rows] @ emb.T
        neighbors[rows], similarity[rows] = _top_k_rows(sim, rows, k)
    return NearestNeighborMatrix(neighbors, similarity)


@dataclass
class CandidateStats:
    unknown_items: int = 0


def candidates(matrix: NearestNeighborMatrix, session_items: Iterable[int],
               stats: CandidateStats | None = None) -> np.ndarray:
    """Sorted union of the session items' neighbor rows, minus the session items."""
    items = list(session_items)
    rows = []
    for it in items:
        if 0 <= it < matrix.no_items:
            rows.append(matrix.neighbors[it])
        elif stats is not None:
            stats.unknown_items += 1
    if not rows:
        return np.zeros(0, dtype=np.int64)
    cand = np.unique(np.concatenate(rows)).astype(np.int64)
    return np.setdiff1d(cand, np.asarray(items, dtype=np.int64), assume_unique=False)
