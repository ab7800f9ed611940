"""Alternating GNN / edge-attention session encoder with an attentive readout."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Binding, ConfigError, ParamStore, Tape, Tensor
from .sessiongraph import BatchedSessionGraph, build_graph


class StateError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    catalog_size: int
    embedding_dim: int = 32
    layer_pattern: str = "GA"
    dropout: float = 0.146
    graph_mode: str = "disjoint"
    # sum alpha_i * x_n (last item) instead of alpha_i * x_i in the global readout
    readout_last_item_only: bool = False

    def __post_init__(self) -> None:
        if not self.layer_pattern or set(self.layer_pattern) - {"G", "A"}:
            raise ConfigError(f"layer_pattern must be a non-empty string over G/A, got {self.layer_pattern!r}")
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.catalog_size < 1:
            raise ConfigError(f"catalog_size must be >= 1, got {self.catalog_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SessionEmbedding:
    local: np.ndarray
    global_: np.ndarray
    combined: np.ndarray


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Every trainable tensor drawn from U(-1/sqrt(d), 1/sqrt(d)); batch-norm gamma 1, beta 0."""
    d, m = config.embedding_dim, config.catalog_size
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    store = ParamStore(dtype)

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape)

    store.add("item_embedding", u(m, d))
    for li, kind in enumerate(config.layer_pattern):
        p = f"layer{li}"
        if kind == "G":
            store.add(f"{p}.gru.W_x", u(d, 3 * d))
            store.add(f"{p}.gru.W_h", u(d, 3 * d))
            store.add(f"{p}.gru.b_x", u(1, 3 * d))
            store.add(f"{p}.gru.b_h", u(1, 3 * d))
            store.add(f"{p}.W_self", u(d, d))
            store.add(f"{p}.W_neigh", u(d, d))
        else:
            store.add(f"{p}.bn.gamma", np.ones((1, d)))
            store.add(f"{p}.bn.beta", np.zeros((1, d)))
            store.add(f"{p}.bn.running_mean", np.zeros((1, d)), trainable=False)
            store.add(f"{p}.bn.running_var", np.ones((1, d)), trainable=False)
            store.add(f"{p}.W_Q", u(d, d))
            store.add(f"{p}.W_K", u(d, d))
            store.add(f"{p}.W_V", u(d, d))
            store.add(f"{p}.W_e", u(d, 1))
    store.add("readout.W_1", u(d, d))
    store.add("readout.W_2", u(d, d))
    store.add("readout.r", u(1, d))
    store.add("readout.q", u(d, 1))
    # row-vector convention: s = [s_local | s_global] @ W_3
    store.add("readout.W_3", u(2 * d, d))
    return store


def gnn_layer(graph: BatchedSessionGraph, H: Tensor, params: Binding, prefix: str) -> Tensor:
    """GRU-aggregated successor messages, then ``H W_self + agg W_neigh``."""
    d = H.cols
    if params[f"{prefix}.W_self"].shape != (d, d):
        raise nx.DimensionError(f"{prefix}: W_self {params[f'{prefix}.W_self'].shape} for width {d}")
    gru = {k: params[f"{prefix}.gru.{k}"] for k in ("W_x", "W_h", "b_x", "b_h")}
    agg = Tensor(np.zeros_like(H.value))
    for nodes, srcs in graph.gru_schedule():
        h = nx.gru_cell(nx.gather_rows(agg, nodes), nx.gather_rows(H, srcs), gru)
        agg = nx.scatter_rows(agg, nodes, h)
    return nx.add(nx.matmul(H, params[f"{prefix}.W_self"]), nx.matmul(agg, params[f"{prefix}.W_neigh"]))


def attention_layer(
    graph: BatchedSessionGraph,
    H: Tensor,
    params: Binding,
    prefix: str,
    mode: str,
    drop_rate: float,
    rng: np.random.Generator | int | None = None,
    return_alpha: bool = False,
):
    """Edge attention over the shortcut graph; receivers without in-edges keep their row."""
    if graph.shortcut is None:
        raise StateError("attention_layer needs the shortcut view; call build_shortcut first")
    store = params.store
    bn_state = nx.BatchNormState(store[f"{prefix}.bn.running_mean"], store[f"{prefix}.bn.running_var"])
    X = nx.batchnorm_dropout(H, params[f"{prefix}.bn.gamma"], params[f"{prefix}.bn.beta"],
                             bn_state, mode, drop_rate, rng)
    e = graph.shortcut
    if len(e) == 0:
        return (H, np.zeros(0)) if return_alpha else H
    Q = nx.matmul(X, params[f"{prefix}.W_Q"])
    K = nx.matmul(X, params[f"{prefix}.W_K"])
    V = nx.matmul(X, params[f"{prefix}.W_V"])
    scores = nx.matmul(nx.sigmoid(nx.add(nx.gather_rows(Q, e.dst), nx.gather_rows(K, e.src))),
                       params[f"{prefix}.W_e"])
    alpha = nx.row_softmax(scores, e.dst)
    agg = nx.segment_sum(nx.mul(nx.gather_rows(V, e.src), alpha), e.dst, H.rows)
    receivers = np.unique(e.dst)
    out = nx.scatter_rows(H, receivers, nx.gather_rows(agg, receivers))
    return (out, alpha.value[:, 0]) if return_alpha else out


def run_stack(
    graph: BatchedSessionGraph,
    params: Binding,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | int | None = None,
) -> Tensor:
    if not config.layer_pattern or set(config.layer_pattern) - {"G", "A"}:
        raise ConfigError(f"invalid layer pattern {config.layer_pattern!r}")
    H = nx.gather_rows(params["item_embedding"], graph.node_item)
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(rng)
    for li, kind in enumerate(config.layer_pattern):
        if kind == "G":
            H = gnn_layer(graph, H, params, f"layer{li}")
        else:
            H = attention_layer(graph, H, params, f"layer{li}", mode, config.dropout, rng)
    return H


def readout_parts(graph: BatchedSessionGraph, H: Tensor, params: Binding,
                  last_item_only: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """(s_local, s_global, s), one row per session, from final node features."""
    occ_nodes, occ_sess = graph.occurrences()
    X_last = nx.gather_rows(H, graph.session_last)
    X_occ = nx.gather_rows(H, occ_nodes)
    X_last_rep = nx.gather_rows(X_last, occ_sess)
    pre = nx.add(nx.add(nx.matmul(X_occ, params["readout.W_1"]), nx.matmul(X_last_rep, params["readout.W_2"])),
                 params["readout.r"])
    alpha = nx.matmul(nx.sigmoid(pre), params["readout.q"])
    weighted = nx.mul(X_last_rep if last_item_only else X_occ, alpha)
    s_global = nx.segment_sum(weighted, occ_sess, graph.session_count)
    s = nx.matmul(nx.concat_cols(X_last, s_global), params["readout.W_3"])
    return X_last, s_global, s


def readout(graph: BatchedSessionGraph, H: Tensor, params: Binding, last_item_only: bool = False) -> Tensor:
    return readout_parts(graph, H, params, last_item_only)[2]


def session_embedding(graph: BatchedSessionGraph, H: Tensor, params: Binding, session: int,
                      last_item_only: bool = False) -> SessionEmbedding:
    if not 0 <= session < graph.session_count:
        raise KeyError(f"unknown session {session}")
    local, glob, s = readout_parts(graph, H, params, last_item_only)
    return SessionEmbedding(local.value[session].copy(), glob.value[session].copy(), s.value[session].copy())


def score(s: Tensor, params: Binding, candidates: Sequence[int] | None = None) -> Tensor:
    """Dot-product scores of session rows against item-embedding rows."""
    E = params["item_embedding"]
    if candidates is None:
        return nx.matmul_nt(s, E)
    cand = np.asarray(candidates, dtype=np.intp)
    if cand.size and (cand.min() < 0 or cand.max() >= E.rows):
        raise IndexError(f"candidate ids must lie in [0, {E.rows})")
    return nx.matmul_nt(s, nx.gather_rows(E, cand))


def loss(logits: Tensor, targets) -> Tensor:
    return nx.softmax_cross_entropy(logits, targets)


class GraphSessionModel:
    """Config plus parameters; forward passes for training and inference."""

    def __init__(self, config: ModelConfig, params: ParamStore | None = None, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)

    def graph(self, sequences: Sequence[Sequence[int]]) -> BatchedSessionGraph:
        return build_graph(sequences, self.config.graph_mode)

    def forward(self, graph: BatchedSessionGraph, tape: Tape | None = None, mode: str = "eval",
                rng: np.random.Generator | int | None = None) -> tuple[Tensor, Binding]:
        """Session embeddings for every session in ``graph``."""
        binding = Binding(self.params, tape)
        H = run_stack(graph, binding, self.config, mode, rng)
        return readout(graph, H, binding, self.config.readout_last_item_only), binding

    def logits(self, sequences: Sequence[Sequence[int]], candidates: Sequence[int] | None = None) -> np.ndarray:
        s, binding = self.forward(self.graph(sequences))
        return score(s, binding, candidates).value

    def batch_loss(self, sequences: Sequence[Sequence[int]], targets, tape: Tape | None,
                   mode: str = "train", rng: np.random.Generator | int | None = None) -> tuple[Tensor, Binding]:
        s, binding = self.forward(self.graph(sequences), tape, mode, rng)
        return loss(score(s, binding), targets), binding
