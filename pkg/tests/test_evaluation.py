import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sessrec.dataio import TrainingSequence, augment_all, prepare_corpus
from sessrec.evaluation import (
    MISS, AblationGrid, EvaluationError, ablate, batch_ranks, evaluate, hit_at_k, model_ranks, mrr_at_k, ndcg_at_k,
    popularity_baseline, rank_of_target, report_from_ranks,
)
from sessrec.knn import build_matrix
from sessrec.model import GraphSessionModel, ModelConfig
from sessrec.numerics import ConfigError
from sessrec.synthetic import planted_markov_corpus
from sessrec.training import TrainConfig, train

from helpers import brute_metrics, brute_rank


def test_closed_forms():
    assert report_from_ranks([1, 1, 1]).as_row() == {"hit@10": 1.0, "mrr@10": 1.0, "ndcg@10": 1.0, "cases": 3}
    r = report_from_ranks([4])
    assert (r.hit, r.mrr, r.ndcg) == (1.0, 0.25, 1 / math.log2(5))
    r = report_from_ranks([11])
    assert (r.hit, r.mrr, r.ndcg) == (0.0, 0.0, 0.0)
    assert report_from_ranks([MISS]).hit == 0.0


def test_empty_ranks_rejected():
    with pytest.raises(EvaluationError):
        hit_at_k([])


def test_metrics_match_oracle_on_random_lists():
    rng = np.random.default_rng(7)
    for _ in range(300):
        ranks = rng.integers(1, 40, size=rng.integers(1, 30))
        k = int(rng.integers(1, 25))
        got = (hit_at_k(ranks, k), mrr_at_k(ranks, k), ndcg_at_k(ranks, k))
        assert np.allclose(got, brute_metrics(ranks.tolist(), k), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=40), st.integers(1, 30))
def test_metric_ordering(ranks, k):
    r = report_from_ranks(ranks, k)
    assert r.ndcg <= r.hit + 1e-15 and r.mrr <= r.hit + 1e-15


def test_rank_tie_rule():
    ids = [5, 2, 9, 1]
    scores = [0.3, 0.7, 0.7, 0.1]
    assert rank_of_target(scores, ids, 2) == 1
    assert rank_of_target(scores, ids, 9) == 2
    assert rank_of_target(scores, ids, 42) == MISS


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**31 - 1))
def test_batch_ranks_match_direct_definition(m, seed):
    rng = np.random.default_rng(seed)
    logits = rng.integers(0, 4, size=(5, m)).astype(float)  # coarse values force ties
    targets = rng.integers(0, m, size=5)
    got = batch_ranks(logits, targets)
    assert got.tolist() == [brute_rank(logits[i], range(m), targets[i]) for i in range(5)]


def test_memorized_pair_hits():
    pairs = [TrainingSequence([0, 1], 2)]
    mc = ModelConfig(8, 8, "GA", dropout=0.0)
    model = train(pairs * 32, mc, TrainConfig(learning_rate=0.02, epochs=10, batch_size=8)).model
    assert evaluate(model, pairs).hit == 1.0
    assert evaluate(model, pairs, k=1).hit == 1.0


@pytest.fixture(scope="module")
def corpus200():
    pc = planted_markov_corpus(200, 3000, seed=1)
    c = prepare_corpus(pc.sessions, min_frequency=1)
    return c, augment_all(c.sequences)[:3000]


def test_random_model_is_chance_level(corpus200):
    c, pairs = corpus200
    hits = [evaluate(GraphSessionModel(ModelConfig(len(c.vocab), 32, "GA"), seed=s), pairs).hit for s in range(3)]
    assert abs(np.mean(hits) - 10 / 200) <= 0.02


def test_restricted_full_neighborhood_equals_offline(corpus200):
    c, pairs = corpus200
    model = GraphSessionModel(ModelConfig(len(c.vocab), 16, "GA"), seed=0)
    matrix = build_matrix(model.params["item_embedding"], len(c.vocab) - 1)
    sub = pairs[:400]
    assert evaluate(model, sub, matrix=matrix) == evaluate(model, sub)


def test_restricted_ranks_are_subset_ranks(corpus200):
    c, pairs = corpus200
    model = GraphSessionModel(ModelConfig(len(c.vocab), 16, "GA"), seed=0)
    full = model_ranks(model, pairs[:400])
    restricted = model_ranks(model, pairs[:400], build_matrix(model.params["item_embedding"], 5))
    # a candidate subset can only move the target up, or drop it entirely
    assert np.all((restricted == MISS) | (restricted <= full))
    assert np.any(restricted == MISS)


def test_popularity_cases():
    train_seqs = [[0, 1, 2], [2, 3], [2]]
    assert popularity_baseline(train_seqs, [TrainingSequence([0], 2)] * 4, 50).as_row()["mrr@10"] == 1.0
    uniform = [[i] for i in range(100)]
    rng = np.random.default_rng(0)
    tests = [TrainingSequence([0], int(t)) for t in rng.integers(0, 100, 5000)]
    rep = popularity_baseline(uniform, tests, 100)
    assert abs(rep.hit - 0.10) < 0.02
    assert rep == popularity_baseline(uniform, tests, 100)
    # all counts tie, so the id rule makes targets 0..9 the hits
    assert rep.hit == np.mean([t.target < 10 for t in tests])


def test_empty_test_set():
    with pytest.raises(EvaluationError):
        popularity_baseline([[0]], [], 3)
    with pytest.raises(EvaluationError):
        evaluate(GraphSessionModel(ModelConfig(3, 4)), [])


def test_unknown_axis():
    with pytest.raises(ConfigError):
        ablate("depth", [1], [], [], ModelConfig(3, 4), TrainConfig())


def test_ablation_grids(small_corpus):
    _, _, train_pairs, valid_pairs = small_corpus
    mc, tc = ModelConfig(40, 8, "GA"), TrainConfig(learning_rate=0.005, epochs=1, batch_size=128, seed=2)
    tp, vp = train_pairs[:800], valid_pairs[:200]
    grid = ablate("layer_pattern", ["GGGG", "AAAA", "GGAA", "AAGG", "GAGA"], tp, vp, mc, tc, nn_size=20)
    lines = grid.to_csv().splitlines()
    assert lines[0] == "layer_pattern,ndcg@10,hit@10,mrr@10,train_seconds,p95_inference_us"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["GGGG", "AAAA", "GGAA", "AAGG", "GAGA"]
    again = ablate("layer_pattern", ["GGGG", "AAAA", "GGAA", "AAGG", "GAGA"], tp, vp, mc, tc, nn_size=20)
    assert again.to_csv(include_timing=False) == grid.to_csv(include_timing=False)

    nn = ablate("nn_size", [5, 10, 20, 39], tp, vp, mc, tc)
    assert len(nn.rows) == 4
    assert len({r["train_seconds"] for r in nn.rows}) == 1  # trained once
    dims = ablate("embedding_dim", [4, 8], tp, vp, mc, tc, nn_size=20)
    assert [r["value"] for r in dims.rows] == [4, 8]


def test_grid_csv_without_rows():
    assert AblationGrid("nn_size").to_csv() == "nn_size,ndcg@10,hit@10,mrr@10,train_seconds,p95_inference_us\n"
