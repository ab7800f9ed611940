"""Offline ranking metrics, the popularity yardstick and ablation grids."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .dataio import TrainingSequence
from .knn import NearestNeighborMatrix, build_matrix, candidates
from .numerics import ConfigError

if TYPE_CHECKING:
    from .model import GraphSessionModel, ModelConfig
    from .training import TrainConfig

MISS = np.inf


class EvaluationError(ValueError):
    pass


@dataclass
class EvalReport:
    hit: float
    mrr: float
    ndcg: float
    k: int
    case_count: int

    def as_row(self) -> dict:
        return {f"hit@{self.k}": self.hit, f"mrr@{self.k}": self.mrr, f"ndcg@{self.k}": self.ndcg,
                "cases": self.case_count}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["cases", f"hit@{self.k}", f"mrr@{self.k}", f"ndcg@{self.k}"])
        w.writerow([self.case_count, repr(self.hit), repr(self.mrr), repr(self.ndcg)])
        return buf.getvalue()

    def table(self) -> str:
        return (f"cases    {self.case_count}\n"
                f"hit@{self.k:<4d} {self.hit:.4f}\n"
                f"mrr@{self.k:<4d} {self.mrr:.4f}\n"
                f"ndcg@{self.k:<3d} {self.ndcg:.4f}")


def rank_of_target(scores: Sequence[float], candidate_ids: Sequence[int], target: int) -> float:
    """1-based rank of ``target``; equal scores rank smaller ids first.  ``MISS`` if absent."""
    ids = np.asarray(candidate_ids)
    sc = np.asarray(scores)
    where = np.flatnonzero(ids == target)
    if where.size == 0:
        return MISS
    t = sc[where[0]]
    return float(1 + np.count_nonzero(sc > t) + np.count_nonzero((sc == t) & (ids < target)))


def batch_ranks(logits: np.ndarray, targets: np.ndarray, candidate_ids: np.ndarray | None = None) -> np.ndarray:
    """Row-wise :func:`rank_of_target` over a full score matrix (columns = item ids)."""
    ids = np.arange(logits.shape[1]) if candidate_ids is None else candidate_ids
    rows = np.arange(logits.shape[0])
    t = logits[rows, targets][:, None]
    return (1 + (logits > t).sum(axis=1) + ((logits == t) & (ids[None, :] < targets[:, None])).sum(axis=1)).astype(float)


def _checked(ranks) -> np.ndarray:
    r = np.asarray(ranks, dtype=float)
    if r.size == 0:
        raise EvaluationError("no ranks to evaluate")
    return r


def hit_at_k(ranks, k: int = 10) -> float:
    r = _checked(ranks)
    return float(np.mean(r <= k))


def mrr_at_k(ranks, k: int = 10) -> float:
    r = _checked(ranks)
    return float(np.mean(np.where(r <= k, 1.0 / r, 0.0)))


def ndcg_at_k(ranks, k: int = 10) -> float:
    # one relevant item per case, so the ideal DCG is 1
    r = _checked(ranks)
    inside = r <= k
    gain = np.zeros_like(r)
    gain[inside] = 1.0 / np.log2(r[inside] + 1.0)
    return float(np.mean(gain))


def report_from_ranks(ranks, k: int = 10) -> EvalReport:
    r = _checked(ranks)
    return EvalReport(hit_at_k(r, k), mrr_at_k(r, k), ndcg_at_k(r, k), k, int(r.size))


def model_ranks(model: "GraphSessionModel", pairs: Sequence[TrainingSequence], matrix: NearestNeighborMatrix | None = None,
                batch_size: int = 256) -> np.ndarray:
    """Rank of each pair's target under ``model``.

    Without ``matrix`` every catalog item competes.  With it, only the union of
    the input items' neighbor rows plus the input items themselves compete, so
    ``k = m - 1`` reproduces the full-catalog ranks.
    """
    out = np.empty(len(pairs), dtype=float)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        logits = model.logits([p.inputs for p in chunk])
        targets = np.array([p.target for p in chunk], dtype=np.intp)
        if matrix is None:
            out[start:start + len(chunk)] = batch_ranks(logits, targets)
            continue
        for j, p in enumerate(chunk):
            cand = np.union1d(candidates(matrix, p.inputs), np.asarray(p.inputs, dtype=np.int64))
            out[start + j] = rank_of_target(logits[j, cand], cand, p.target)
    return out


def evaluate(model: "GraphSessionModel", pairs: Sequence[TrainingSequence], k: int = 10,
             matrix: NearestNeighborMatrix | None = None, batch_size: int = 256) -> EvalReport:
    if not pairs:
        raise EvaluationError("empty test set")
    return report_from_ranks(model_ranks(model, pairs, matrix, batch_size), k)


def popularity_counts(sequences: Iterable[Sequence[int]], catalog_size: int) -> np.ndarray:
    counts = np.zeros(catalog_size, dtype=np.int64)
    for seq in sequences:
        np.add.at(counts, np.asarray(getattr(seq, "inputs", seq), dtype=np.intp), 1)
    return counts


def popularity_order(counts: np.ndarray) -> np.ndarray:
    """Item ids by descending count, ties by ascending id."""
    return np.lexsort((np.arange(counts.size), -counts))


def popularity_baseline(train_sequences: Iterable[Sequence[int]], test_pairs: Sequence[TrainingSequence],
                        catalog_size: int, k: int = 10) -> EvalReport:
    """Rank every test target by its training-set frequency."""
    if not test_pairs:
        raise EvaluationError("empty test set")
    counts = popularity_counts(train_sequences, catalog_size).astype(float)
    targets = np.array([p.target for p in test_pairs], dtype=np.intp)
    return report_from_ranks(batch_ranks(np.broadcast_to(counts, (targets.size, catalog_size)), targets), k)


# ---------------------------------------------------------------------------
# ablations

AXES = ("layer_pattern", "nn_size", "embedding_dim")
ABLATION_COLUMNS = ("value", "ndcg@10", "hit@10", "mrr@10", "train_seconds", "p95_inference_us")


@dataclass
class AblationGrid:
    axis: str
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, include_timing: bool = True) -> str:
        cols = ABLATION_COLUMNS if include_timing else ABLATION_COLUMNS[:4]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis, *cols[1:]])
        for r in self.rows:
            vals = [r["value"], repr(r["ndcg@10"]), repr(r["hit@10"]), repr(r["mrr@10"])]
            if include_timing:
                vals += [f"{r['train_seconds']:.3f}", f"{r['p95_inference_us']:.1f}"]
            w.writerow(vals)
        return buf.getvalue()


def _p95_inference_us(model: "GraphSessionModel", matrix: NearestNeighborMatrix, pairs: Sequence[TrainingSequence],
                      samples: int = 200) -> float:
    from .serving import Recommender

    rec = Recommender.from_dense(model, matrix)
    lat = []
    for p in pairs[:samples]:
        t0 = time.perf_counter_ns()
        rec.infer_dense(p.inputs[-3:], n=10)
        lat.append((time.perf_counter_ns() - t0) / 1e3)
    return float(np.percentile(lat, 95)) if lat else 0.0


def ablate(
    axis: str,
    values: Sequence,
    train_pairs: Sequence[TrainingSequence],
    test_pairs: Sequence[TrainingSequence],
    model_config: "ModelConfig",
    train_config: "TrainConfig",
    nn_size: int = 100,
) -> AblationGrid:
    """Train/evaluate one cell per value along ``axis``.

    Metrics come from NN-restricted ranking (``nn_size`` neighbors) so every
    axis is measured the way serving sees it; the ``nn_size`` axis trains once
    and only rebuilds the neighbor table.
    """
    from dataclasses import replace

    from .training import train

    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    grid = AblationGrid(axis)
    m = model_config.catalog_size

    def cell(value, model, seconds, k):
        matrix = build_matrix(model.params["item_embedding"], min(k, m - 1))
        rep = evaluate(model, test_pairs, 10, matrix)
        grid.rows.append({"value": value, "ndcg@10": rep.ndcg, "hit@10": rep.hit, "mrr@10": rep.mrr,
                          "train_seconds": seconds, "p95_inference_us": _p95_inference_us(model, matrix, test_pairs)})

    if axis == "nn_size":
        t0 = time.perf_counter()
        model = train(train_pairs, model_config, train_config).model
        seconds = time.perf_counter() - t0
        for k in values:
            cell(int(k), model, seconds, int(k))
        return grid
    for v in values:
        cfg = replace(model_config, layer_pattern=str(v)) if axis == "layer_pattern" \
            else replace(model_config, embedding_dim=int(v))
        t0 = time.perf_counter()
        model = train(train_pairs, cfg, train_config).model
        cell(v, model, time.perf_counter() - t0, nn_size)
    return grid
