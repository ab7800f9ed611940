"""Shared oracles for the test suite."""

from __future__ import annotations

from typing import Callable

import numpy as np

from sessrec.numerics import Binding, ParamStore, Tape, Tensor, numeric_gradient, relative_error


def leaf(arr, tape):
    return Tensor(np.array(arr, dtype=np.float64), tape)


def check_op_gradients(build: Callable[..., Tensor], arrays: list[np.ndarray], h: float = 1e-5) -> list[float]:
    """Relative errors between taped and finite-difference gradients of ``sum(w * build(*xs))``.

    A fixed random weighting turns any output into a scalar without making the
    gradient trivially uniform.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out0 = build(*[Tensor(a) for a in arrays]).value
    w = np.random.default_rng(99).normal(size=out0.shape)

    def f():
        return float(np.sum(w * build(*[Tensor(a) for a in arrays]).value))

    tape = Tape()
    leaves = [Tensor(a, tape) for a in arrays]
    out = build(*leaves)
    wt = Tensor(w)
    from sessrec import numerics as nx
    loss = nx.matmul(nx.matmul(Tensor(np.ones((1, out.rows))), nx.mul(out, wt)), Tensor(np.ones((out.cols, 1))))
    tape.backward(loss)
    errs = []
    for lf, arr in zip(leaves, arrays):
        num = numeric_gradient(f, arr, h)
        ana = lf.grad if lf.grad is not None else np.zeros_like(arr)
        errs.append(relative_error(ana, num))
    return errs


def check_store_gradients(store: ParamStore, loss_fn: Callable[[Binding], Tensor], h: float = 1e-5,
                          names: list[str] | None = None) -> dict[str, float]:
    """Per-parameter relative error between backprop and central differences."""
    store.zero_grad()
    tape = Tape()
    binding = Binding(store, tape)
    loss = loss_fn(binding)
    tape.backward(loss)
    binding.flush()
    out = {}
    for name in names or store.names(trainable_only=True):
        ana = store.entry(name).grad.copy()

        def f():
            return float(loss_fn(Binding(store, None)).value[0, 0])

        num = numeric_gradient(f, store[name], h)
        out[name] = relative_error(ana, num)
    return out


def brute_rank(scores, ids, target):
    """Direct definition: position of target in the list sorted by (-score, id)."""
    order = sorted(zip(scores, ids), key=lambda t: (-t[0], t[1]))
    for pos, (_, i) in enumerate(order, 1):
        if i == target:
            return pos
    return float("inf")


def brute_metrics(ranks, k):
    """Loop-based hit/mrr/ndcg straight from the definitions."""
    import math

    n = len(ranks)
    hit = sum(1 for r in ranks if r <= k) / n
    mrr = sum((1.0 / r) if r <= k else 0.0 for r in ranks) / n
    ndcg = sum((1.0 / math.log2(r + 1)) if r <= k else 0.0 for r in ranks) / n
    return hit, mrr, ndcg


def brute_edges(batch):
    """Successor and shortcut edges as multisets keyed by item labels, enumerated naively."""
    from collections import Counter

    succ, short = Counter(), Counter()
    for s, seq in enumerate(batch):
        for a, b in zip(seq, seq[1:]):
            if a != b:
                succ[(s, a, b)] += 1
        pairs = set()
        for i in range(len(seq)):
            for j in range(i + 1, len(seq)):
                if seq[i] != seq[j]:
                    pairs.add((seq[i], seq[j]))
        for a, b in pairs:
            short[(s, a, b)] += 1
    return succ, short
