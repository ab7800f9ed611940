"""Batch session sequences into successor and shortcut multigraphs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DISJOINT = "disjoint"
MERGED = "merged"


class GraphInputError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeList:
    """Parallel arrays describing a directed multigraph's edges."""

    src: np.ndarray
    dst: np.ndarray
    session: np.ndarray
    position: np.ndarray

    def __len__(self) -> int:
        return int(self.src.size)

    def tuples(self) -> list[tuple[int, int, int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist(), self.session.tolist(), self.position.tolist()))


def _edges(rows: list[tuple[int, int, int, int]]) -> EdgeList:
    a = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EdgeList(a[:, 0].copy(), a[:, 1].copy(), a[:, 2].copy(), a[:, 3].copy())


@dataclass
class BatchedSessionGraph:
    node_count: int
    node_item: np.ndarray
    successor: EdgeList
    session_nodes: list[np.ndarray]
    session_last: np.ndarray
    mode: str = DISJOINT
    shortcut: EdgeList | None = None
    _gru_schedule: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)

    @property
    def session_count(self) -> int:
        return len(self.session_nodes)

    def occurrences(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (node, session) per item occurrence, sessions in batch order."""
        nodes = np.concatenate(self.session_nodes) if self.session_nodes else np.zeros(0, np.int64)
        sess = np.repeat(np.arange(self.session_count), [len(s) for s in self.session_nodes])
        return nodes, sess

    def gru_schedule(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per fold step t: (receiving nodes, source node of each one's t-th in-edge).

        In-edges of every node are taken in :func:`edge_order`, so step t feeds
        the t-th message to every node that has more than t incoming edges.
        """
        if self._gru_schedule is None:
            e = self.successor
            order = np.lexsort((e.position, e.session, e.dst))
            dst, src = e.dst[order], e.src[order]
            steps: list[tuple[np.ndarray, np.ndarray]] = []
            if dst.size:
                start = np.r_[0, np.flatnonzero(np.diff(dst)) + 1]
                rank = np.arange(dst.size) - np.repeat(start, np.diff(np.r_[start, dst.size]))
                for t in range(int(rank.max()) + 1):
                    sel = rank == t
                    steps.append((dst[sel], src[sel]))
            self._gru_schedule = steps
        return self._gru_schedule

    def to_dot(self, labels: Sequence | None = None) -> str:
        """Graphviz text: solid successor edges, dashed shortcut edges."""
        name = (lambda n: str(labels[self.node_item[n]])) if labels is not None else (lambda n: str(self.node_item[n]))
        lines = ["digraph session_batch {"]
        for n in range(self.node_count):
            lines.append(f'  n{n} [label="{name(n)}"];')
        for s, d, sess, pos in self.successor.tuples():
            lines.append(f'  n{s} -> n{d} [label="s{sess}:{pos}"];')
        if self.shortcut is not None:
            for s, d, sess, _ in self.shortcut.tuples():
                lines.append(f'  n{s} -> n{d} [style=dashed, color=gray, label="s{sess}"];')
        lines.append("}")
        return "\n".join(lines)


def build_graph(batch: Sequence[Sequence[int]], mode: str = DISJOINT, shortcut: bool = True) -> BatchedSessionGraph:
    """Nodes and ordered successor edges for a batch of item sequences.

    ``batch`` holds input item lists (a ``TrainingSequence`` contributes its
    ``inputs``).  A session's i-th adjacent pair becomes an edge with position i;
    pairs of one node with itself are not added.
    """
    if mode not in (DISJOINT, MERGED):
        raise GraphInputError(f"unknown graph mode {mode!r}")
    if len(batch) == 0:
        raise GraphInputError("empty batch")
    node_item: list[int] = []
    shared: dict[int, int] = {}
    edges: list[tuple[int, int, int, int]] = []
    session_nodes: list[np.ndarray] = []
    last = np.empty(len(batch), dtype=np.int64)
    for s, seq in enumerate(batch):
        seq = getattr(seq, "inputs", seq)
        if len(seq) == 0:
            raise GraphInputError(f"sequence {s} in batch is empty")
        local = shared if mode == MERGED else {}
        occ = []
        for item in seq:
            node = local.get(item)
            if node is None:
                node = len(node_item)
                local[item] = node
                node_item.append(int(item))
            occ.append(node)
        for pos in range(len(occ) - 1):
            if occ[pos] != occ[pos + 1]:
                edges.append((occ[pos], occ[pos + 1], s, pos))
        session_nodes.append(np.array(occ, dtype=np.int64))
        last[s] = occ[-1]
    g = BatchedSessionGraph(
        node_count=len(node_item),
        node_item=np.array(node_item, dtype=np.int64),
        successor=_edges(edges),
        session_nodes=session_nodes,
        session_last=last,
        mode=mode,
    )
    if shortcut:
        build_shortcut(g)
    return g


def build_shortcut(graph: BatchedSessionGraph) -> BatchedSessionGraph:
    """Add an edge u->v per session whenever v occurs anywhere after u (u != v), once per pair."""
    rows: list[tuple[int, int, int, int]] = []
    for s, occ in enumerate(graph.session_nodes):
        seen: set[tuple[int, int]] = set()
        occ = occ.tolist()
        for i, u in enumerate(occ):
            for v in occ[i + 1:]:
                if u != v and (u, v) not in seen:
                    seen.add((u, v))
                    rows.append((u, v, s, len(seen) - 1))
    graph.shortcut = _edges(rows)
    return graph


def edge_order(graph: BatchedSessionGraph, node: int) -> list[tuple[int, int, int, int]]:
    """Incoming successor edges of ``node`` sorted by (session, position)."""
    if not 0 <= node < graph.node_count:
        raise GraphInputError(f"node {node} not in graph of {graph.node_count} nodes")
    return sorted((e for e in graph.successor.tuples() if e[1] == node), key=lambda e: (e[2], e[3]))
