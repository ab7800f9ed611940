import math

import numpy as np
import pytest

from sessrec import numerics as nx
from sessrec.model import (
    GraphSessionModel, ModelConfig, StateError, attention_layer, gnn_layer, init_params, loss, readout, run_stack, score,
    session_embedding,
)
from sessrec.numerics import Binding, ConfigError, Tape, Tensor, numeric_gradient, relative_error
from sessrec.sessiongraph import build_graph

from helpers import check_store_gradients


def _store(d=4, m=6, pattern="GA", seed=0):
    return init_params(ModelConfig(m, d, pattern, dropout=0.0), seed=seed, dtype=np.float64)


def _H(g, d, rng):
    return Tensor(rng.normal(size=(g.node_count, d)))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(5, 4, "GX")
    with pytest.raises(ConfigError):
        ModelConfig(5, 4, "")
    with pytest.raises(ConfigError):
        ModelConfig(5, 1, "G")


def test_gnn_isolated_node_with_identity_self_transform(rng):
    store = _store()
    store.set_value("layer0.W_self", np.eye(4))
    g = build_graph([[0, 1], [2]])
    H = _H(g, 4, rng)
    out = gnn_layer(g, H, Binding(store, None), "layer0")
    first = int(g.session_nodes[0][0])
    alone = int(g.session_nodes[1][0])
    assert np.allclose(out.value[first], H.value[first], atol=1e-15)
    assert np.allclose(out.value[alone], H.value[alone], atol=1e-15)


def test_gnn_zero_gru_reduces_to_self_transform(rng):
    store = _store()
    for k in ("W_x", "W_h", "b_x", "b_h"):
        store.set_value(f"layer0.gru.{k}", np.zeros_like(store[f"layer0.gru.{k}"]))
    g = build_graph([[0, 1, 2, 1, 3]])
    H = _H(g, 4, rng)
    out = gnn_layer(g, H, Binding(store, None), "layer0")
    assert np.allclose(out.value, H.value @ store["layer0.W_self"], atol=1e-14)


def test_gnn_matches_per_node_fold(rng):
    store = _store()
    g = build_graph([[0, 1, 2, 1, 3], [3, 1]], mode="merged")
    H = _H(g, 4, rng)
    b = Binding(store, None)
    out = gnn_layer(g, H, b, "layer0").value
    gru = {k: b[f"layer0.gru.{k}"] for k in ("W_x", "W_h", "b_x", "b_h")}
    from sessrec.sessiongraph import edge_order
    for v in range(g.node_count):
        msgs = [Tensor(H.value[[u]]) for u, *_ in edge_order(g, v)]
        agg = nx.gru_fold(Tensor(np.zeros((1, 4))), msgs, gru).value[0]
        ref = H.value[v] @ store["layer0.W_self"] + agg @ store["layer0.W_neigh"]
        assert np.allclose(out[v], ref, atol=1e-12)


def test_gnn_gradients_small_graph(rng):
    store = _store()
    g = build_graph([[0, 1, 2, 3]])  # 4 nodes, 3 edges
    H0 = rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))

    def f(b):
        out = gnn_layer(g, Tensor(H0), b, "layer0")
        return nx.matmul(nx.matmul(Tensor(np.ones((1, 4))), nx.mul(out, Tensor(w))), Tensor(np.ones((4, 1))))

    names = [n for n in store.names() if n.startswith("layer0")]
    errs = check_store_gradients(store, f, names=names)
    assert max(errs.values()) < 1e-4, errs


def _eval_X(store, H):
    return (H - store["layer1.bn.running_mean"]) / np.sqrt(store["layer1.bn.running_var"] + 1e-5)


def test_attention_single_in_neighbor_copies_value(rng):
    store = _store()
    g = build_graph([[0, 1]])
    H = _H(g, 4, rng)
    out = attention_layer(g, H, Binding(store, None), "layer1", "eval", 0.0).value
    V = _eval_X(store, H.value) @ store["layer1.W_V"]
    assert np.allclose(out[1], V[0], atol=1e-14)
    assert np.array_equal(out[0], H.value[0])  # no in-neighbors: passthrough


def test_attention_equal_scores_average_values(rng):
    store = _store()
    store.set_value("layer1.W_e", np.zeros((4, 1)))
    g = build_graph([[0, 1, 2]])
    H = _H(g, 4, rng)
    out = attention_layer(g, H, Binding(store, None), "layer1", "eval", 0.0).value
    V = _eval_X(store, H.value) @ store["layer1.W_V"]
    assert np.allclose(out[2], (V[0] + V[1]) / 2, atol=1e-14)


def test_attention_needs_shortcut_view(rng):
    g = build_graph([[0, 1]], shortcut=False)
    with pytest.raises(StateError):
        attention_layer(g, _H(g, 4, rng), Binding(_store(), None), "layer1", "eval", 0.0)


def test_attention_rows_stochastic(rng):
    store = _store(m=8)
    for _ in range(50):
        batch = [list(rng.integers(0, 8, size=rng.integers(1, 7))) for _ in range(rng.integers(1, 6))]
        g = build_graph(batch, mode=str(rng.choice(["disjoint", "merged"])))
        _, alpha = attention_layer(g, _H(g, 4, rng), Binding(store, None), "layer1", "eval", 0.0,
                                   return_alpha=True)
        if alpha.size:
            sums = np.bincount(g.shortcut.dst, weights=alpha, minlength=g.node_count)
            has = np.bincount(g.shortcut.dst, minlength=g.node_count) > 0
            assert np.allclose(sums[has], 1.0, atol=1e-6)
            assert ((alpha >= 0) & (alpha <= 1)).all()


def test_attention_gradients(rng):
    store = _store()
    g = build_graph([[0, 1, 2, 1], [3, 4]])
    H0 = rng.normal(size=(g.node_count, 4))
    w = rng.normal(size=H0.shape)

    def f(b):
        out = attention_layer(g, Tensor(H0), b, "layer1", "train", 0.0, rng=0)
        return nx.matmul(nx.matmul(Tensor(np.ones((1, out.rows))), nx.mul(out, Tensor(w))), Tensor(np.ones((4, 1))))

    names = [n for n in store.names(trainable_only=True) if n.startswith("layer1")]
    errs = check_store_gradients(store, f, names=names)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("pattern", ["G", "GA", "GAGA", "GGGG", "AAAA", "GGAA", "AAGG"])
def test_run_stack_patterns(pattern, rng):
    cfg = ModelConfig(6, 4, pattern, dropout=0.0)
    store = init_params(cfg, 1, np.float64)
    g = build_graph([[0, 1, 2], [2, 1, 3]], mode="merged")
    H = run_stack(g, Binding(store, None), cfg)
    assert H.shape == (g.node_count, 4) and np.isfinite(H.value).all()
    if pattern == "G":
        ref = gnn_layer(g, nx.gather_rows(Tensor(store["item_embedding"]), g.node_item), Binding(store, None), "layer0")
        assert np.array_equal(H.value, ref.value)


def test_run_stack_rejects_bad_pattern():
    cfg = ModelConfig(6, 4, "GA")
    cfg.layer_pattern = "GZ"
    with pytest.raises(ConfigError):
        run_stack(build_graph([[0]]), Binding(init_params(ModelConfig(6, 4, "GA")), None), cfg)


def _hand_readout(store, H, occ, last):
    """Straight-line evaluation of local / attention-weighted global / projection."""
    d = H.shape[1]
    xn = H[last]
    s_global = np.zeros(d)
    for i in occ:
        pre = [sum(H[i, k] * store["readout.W_1"][k, j] + xn[k] * store["readout.W_2"][k, j] for k in range(d))
               + store["readout.r"][0, j] for j in range(d)]
        alpha = sum(store["readout.q"][j, 0] / (1 + math.exp(-pre[j])) for j in range(d))
        s_global += alpha * H[i]
    cat = np.concatenate([xn, s_global])
    return np.array([sum(cat[k] * store["readout.W_3"][k, j] for k in range(2 * d)) for j in range(d)])


def test_readout_matches_hand_evaluation(rng):
    store = _store()
    g = build_graph([[0, 1, 2], [3, 4, 3, 5]])
    H = rng.normal(size=(g.node_count, 4))
    s = readout(g, Tensor(H), Binding(store, None)).value
    for sess in range(2):
        ref = _hand_readout(store, H, g.session_nodes[sess], g.session_last[sess])
        assert np.abs(s[sess] - ref).max() < 1e-10


def test_readout_zero_attention_and_projection(rng):
    store = _store()
    store.set_value("readout.q", np.zeros((4, 1)))
    g = build_graph([[3]])
    H = rng.normal(size=(1, 4))
    emb = session_embedding(g, Tensor(H), Binding(store, None), 0)
    assert not emb.global_.any()
    assert np.allclose(emb.combined, np.concatenate([H[0], np.zeros(4)]) @ store["readout.W_3"])
    store.set_value("readout.q", rng.normal(size=(4, 1)))
    store.set_value("readout.W_3", np.vstack([np.eye(4), np.zeros((4, 4))]))
    g2 = build_graph([[0, 1, 2]])
    H2 = rng.normal(size=(3, 4))
    emb = session_embedding(g2, Tensor(H2), Binding(store, None), 0)
    assert np.array_equal(emb.combined, emb.local)
    with pytest.raises(KeyError):
        session_embedding(g2, Tensor(H2), Binding(store, None), 3)


def test_readout_last_item_only_flag(rng):
    store = _store()
    g = build_graph([[0, 1, 2]])
    H = rng.normal(size=(3, 4))
    b = Binding(store, None)
    emb = session_embedding(g, Tensor(H), b, 0, last_item_only=True)
    pre = H @ store["readout.W_1"] + H[2] @ store["readout.W_2"] + store["readout.r"]
    alpha = (1 / (1 + np.exp(-pre))) @ store["readout.q"]
    assert np.allclose(emb.global_, alpha.sum() * H[2], atol=1e-12)


def test_score_properties(rng):
    store = _store(m=9)
    b = Binding(store, None)
    assert not score(Tensor(np.zeros((1, 4))), b).value.any()
    s = Tensor(rng.normal(size=(1, 4)))
    full = score(s, b).value[0]
    p = np.exp(full - full.max())
    assert abs((p / p.sum()).sum() - 1) < 1e-6
    subset = np.array([7, 2, 5, 0])
    sub = score(s, b, subset).value[0]
    assert np.array_equal(sub, full[subset])
    assert list(subset[np.argsort(-sub, kind="stable")]) == [i for i in np.argsort(-full, kind="stable") if i in subset]
    with pytest.raises(IndexError):
        score(s, b, [9])


def test_loss_conventions(rng):
    assert abs(loss(Tensor(np.zeros((1, 100))), [3]).value[0, 0] - math.log(100)) < 1e-12
    logits = rng.normal(size=(2, 11))
    rows = [loss(Tensor(logits[[i]]), [t]).value[0, 0] for i, t in enumerate([4, 9])]
    assert abs(loss(Tensor(logits), [4, 9]).value[0, 0] - np.mean(rows)) < 1e-14
    tape = Tape()
    x = Tensor(logits.copy(), tape)
    tape.backward(loss(x, [4, 9]))
    num = numeric_gradient(lambda: float(loss(Tensor(logits), [4, 9]).value[0, 0]), logits)
    assert relative_error(x.grad, num) < 1e-6


@pytest.mark.parametrize("pattern,mode", [("GA", "disjoint"), ("GA", "merged"), ("AGAG", "disjoint")])
def test_whole_model_gradients(pattern, mode, rng):
    model = GraphSessionModel(ModelConfig(5, 4, pattern, dropout=0.0, graph_mode=mode), seed=3, dtype=np.float64)
    batch = [[0, 1, 2], [3, 1], [4, 0, 4, 2]]
    targets = [3, 2, 1]

    def f(b):
        g = model.graph(batch)
        H = run_stack(g, b, model.config, "train", rng=0)
        return loss(score(readout(g, H, b), b), targets)

    errs = check_store_gradients(model.params, f)
    assert max(errs.values()) < 1e-4, errs


def test_permuting_sessions_leaves_embeddings_bit_identical():
    model = GraphSessionModel(ModelConfig(12, 8, "GAGA", dropout=0.146), seed=4)
    rng = np.random.default_rng(0)
    batch = [list(rng.integers(0, 12, size=rng.integers(1, 8))) for _ in range(9)]
    s1, _ = model.forward(model.graph(batch))
    perm = rng.permutation(9)
    s2, _ = model.forward(model.graph([batch[i] for i in perm]))
    for new, old in enumerate(perm):
        assert s2.value[new].tobytes() == s1.value[old].tobytes()


@pytest.mark.parametrize("pattern", ["GA", "GAGA"])
def test_stack_finite_on_many_random_fixtures(pattern):
    rng = np.random.default_rng(8)
    model = GraphSessionModel(ModelConfig(30, 8, pattern), seed=2)
    b = Binding(model.params, None)
    for _ in range(1000):
        batch = [list(rng.integers(0, 30, size=rng.integers(1, 20))) for _ in range(rng.integers(1, 5))]
        g = model.graph(batch)
        mode = "train" if rng.random() < 0.5 else "eval"
        H = run_stack(g, b, model.config, mode, rng)
        assert np.isfinite(readout(g, H, b).value).all()
