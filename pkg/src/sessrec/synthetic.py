"""Planted first-order Markov session corpora for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import SessionRecord


@dataclass
class PlantedCorpus:
    sessions: list[SessionRecord]
    transitions: np.ndarray  # (n_items, n_items) row-stochastic, indexed by item position
    raw_ids: np.ndarray


def planted_markov_corpus(
    n_items: int = 200,
    n_sessions: int = 20_000,
    seed: int = 0,
    branching: int = 4,
    min_length: int = 3,
    max_length: int = 8,
    n_categories: int | None = None,
    stray_rate: float = 0.0,
    raw_offset: int = 1000,
) -> PlantedCorpus:
    """Sessions walked from a sparse random transition table.

    Each item moves to one of ``branching`` successors (never itself) with
    Dirichlet-drawn weights; first items follow a Zipf-like popularity.  With
    ``n_categories`` the successors share the item's category and each step is
    replaced by a random other-category item with probability ``stray_rate``.
    """
    rng = np.random.default_rng(seed)
    cats = np.arange(n_items) % n_categories if n_categories else np.zeros(n_items, dtype=int)
    trans = np.zeros((n_items, n_items))
    for i in range(n_items):
        pool = np.flatnonzero((cats == cats[i]) & (np.arange(n_items) != i))
        succ = rng.choice(pool, size=min(branching, pool.size), replace=False)
        trans[i, succ] = rng.dirichlet(np.ones(succ.size))
    start_p = 1.0 / np.arange(1, n_items + 1) ** 0.8
    start_p = rng.permutation(start_p / start_p.sum())
    raw = np.arange(n_items) + raw_offset
    sessions = []
    t = 1_700_000_000
    for s in range(n_sessions):
        length = int(rng.integers(min_length, max_length + 1))
        seq = [int(rng.choice(n_items, p=start_p))]
        while len(seq) < length:
            seq.append(int(rng.choice(n_items, p=trans[seq[-1]])))
        if n_categories and stray_rate > 0:
            for pos in range(len(seq) - 1):
                if rng.random() < stray_rate:
                    others = np.flatnonzero(cats != cats[seq[pos]])
                    seq[pos] = int(rng.choice(others))
        sessions.append(SessionRecord(
            session_id=f"s{s}",
            items=[int(raw[i]) for i in seq],
            categories=[f"c{cats[i]}" for i in seq] if n_categories else None,
            timestamps=[t + 30 * j for j in range(len(seq))],
        ))
        t += 600
    return PlantedCorpus(sessions, trans, raw)
