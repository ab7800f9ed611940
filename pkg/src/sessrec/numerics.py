"""Dense 2-D tensors with a recorded backward tape.

Every differentiable operation here computes its forward result with numpy and,
when any input is attached to a :class:`Tape`, records a closure that pushes the
output gradient back to its inputs.  There is no general symbolic machinery:
each op carries its own analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GroupingError(ValueError):
    """A segment used for a grouped reduction is empty."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class Tape:
    """Records backward closures in forward order and replays them reversed."""

    def __init__(self) -> None:
        self._ops: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)

    def backward(self, out: "Tensor") -> None:
        if out.value.size != 1:
            raise DimensionError(f"backward needs a scalar output, got shape {out.shape}")
        out.grad = np.ones_like(out.value)
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()


class Tensor:
    """A 2-D array plus an optional gradient slot.

    ``tape`` is None for constants and for inference-time values; ops whose
    inputs all lack a tape record nothing.
    """

    __slots__ = ("value", "grad", "tape", "name")

    def __init__(self, value, tape: Tape | None = None, name: str | None = None):
        value = np.asarray(value)
        if value.ndim != 2:
            raise DimensionError(f"Tensor expects a 2-D array, got shape {value.shape}")
        self.value = value
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def accumulate(self, g: np.ndarray) -> None:
        if self.tape is None:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.value.dtype})"


def const(value, dtype=None) -> Tensor:
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Tensor(arr)


def _tape_of(*xs: Tensor | None) -> Tape | None:
    for x in xs:
        if x is not None and x.tape is not None:
            return x.tape
    return None


def _out(value: np.ndarray, *inputs: Tensor | None) -> Tensor:
    return Tensor(value, _tape_of(*inputs))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# linear algebra


def rowdot(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``a @ v`` for a vector ``v``, with every row reduced identically.

    BLAS gemv results depend on a row's position in the block, which breaks
    bitwise reproducibility when the same row appears in a different batch.
    """
    return (a * v).sum(axis=1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = _out(rowdot(a.value, b.value[:, 0])[:, None] if b.cols == 1 else a.value @ b.value, a, b)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            a.accumulate(g @ b.value.T)
            b.accumulate(a.value.T @ g)

        out.tape.record(back)
    return out


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T``; scores sessions against embedding rows without a transpose copy."""
    if a.cols != b.cols:
        raise DimensionError(f"matmul_nt: {a.shape} @ {b.shape}^T")
    out = _out(a.value @ b.value.T, a, b)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            a.accumulate(g @ b.value)
            b.accumulate(g.T @ a.value)

        out.tape.record(back)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    if x.cols != w.rows:
        raise DimensionError(f"affine: X {x.shape} incompatible with W {w.shape}")
    if b is not None and b.shape != (1, w.cols):
        raise DimensionError(f"affine: bias {b.shape} must be (1, {w.cols}) for W {w.shape}")
    y = x.value @ w.value
    if b is not None:
        y = y + b.value
    out = _out(y, x, w, b)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            x.accumulate(g @ w.value.T)
            w.accumulate(x.value.T @ g)
            if b is not None:
                b.accumulate(g.sum(axis=0, keepdims=True))

        out.tape.record(back)
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a ``1 x cols`` row broadcast over ``a``."""
    row_bcast = b.rows == 1 and a.rows != 1 and b.cols == a.cols
    if not row_bcast:
        _check_same(a, b, "add")
    out = _out(a.value + b.value, a, b)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            a.accumulate(g)
            b.accumulate(g.sum(axis=0, keepdims=True) if row_bcast else g)

        out.tape.record(back)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    out = _out(a.value - b.value, a, b)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            a.accumulate(g)
            b.accumulate(-g)

        out.tape.record(back)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be an ``rows x 1`` column scaling each row."""
    col_bcast = b.cols == 1 and a.cols != 1 and b.rows == a.rows
    if not col_bcast:
        _check_same(a, b, "mul")
    out = _out(a.value * b.value, a, b)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            a.accumulate(g * b.value)
            gb = g * a.value
            b.accumulate(gb.sum(axis=1, keepdims=True) if col_bcast else gb)

        out.tape.record(back)
    return out


def one_minus(a: Tensor) -> Tensor:
    out = _out(1.0 - a.value, a)
    if out.tape is not None:

        def back():
            if out.grad is not None:
                a.accumulate(-out.grad)

        out.tape.record(back)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.value)
    out = _out(y, a)
    if out.tape is not None:

        def back():
            if out.grad is not None:
                a.accumulate(out.grad * y * (1.0 - y))

        out.tape.record(back)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    out = _out(y, a)
    if out.tape is not None:

        def back():
            if out.grad is not None:
                a.accumulate(out.grad * (1.0 - y * y))

        out.tape.record(back)
    return out


# ---------------------------------------------------------------------------
# structural


def col_slice(a: Tensor, start: int, stop: int) -> Tensor:
    out = _out(a.value[:, start:stop], a)
    if out.tape is not None:

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(a.value)
            g[:, start:stop] = out.grad
            a.accumulate(g)

        out.tape.record(back)
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols: row counts {a.rows} and {b.rows} differ")
    split = a.cols
    out = _out(np.concatenate([a.value, b.value], axis=1), a, b)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            a.accumulate(g[:, :split])
            b.accumulate(g[:, split:])

        out.tape.record(back)
    return out


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = _out(a.value[idx], a)
    if out.tape is not None:

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(a.value)
            np.add.at(g, idx, out.grad)
            a.accumulate(g)

        out.tape.record(back)
    return out


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (unique) replaced by ``rows``."""
    idx = np.asarray(idx, dtype=np.intp)
    if rows.rows != idx.size or rows.cols != base.cols:
        raise DimensionError(f"scatter_rows: {rows.shape} into {base.shape} at {idx.size} rows")
    y = base.value.copy()
    y[idx] = rows.value
    out = _out(y, base, rows)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            rows.accumulate(g[idx])
            gb = g.copy()
            gb[idx] = 0.0
            base.accumulate(gb)

        out.tape.record(back)
    return out


def segment_sum(a: Tensor, segment_ids, n_segments: int) -> Tensor:
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.size != a.rows:
        raise DimensionError(f"segment_sum: {seg.size} ids for {a.rows} rows")
    y = np.zeros((n_segments, a.cols), dtype=a.value.dtype)
    np.add.at(y, seg, a.value)
    out = _out(y, a)
    if out.tape is not None:

        def back():
            if out.grad is not None:
                a.accumulate(out.grad[seg])

        out.tape.record(back)
    return out


def row_softmax(scores: Tensor, segment_ids, n_segments: int | None = None) -> Tensor:
    """Softmax of a score column within groups of rows sharing a segment id.

    ``scores`` is ``E x 1``.  Each segment listed in ``range(n_segments)`` must own
    at least one row; pass ``n_segments=None`` to use only the ids present.
    """
    if scores.cols != 1:
        raise DimensionError(f"row_softmax expects an E x 1 column, got {scores.shape}")
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.size != scores.rows:
        raise DimensionError(f"row_softmax: {seg.size} ids for {scores.rows} rows")
    if seg.size == 0:
        raise GroupingError("row_softmax: no rows to normalize")
    if n_segments is None:
        n_segments = int(seg.max()) + 1
        counts = np.bincount(seg, minlength=n_segments)
        present = counts > 0
    else:
        counts = np.bincount(seg, minlength=n_segments)
        if (counts == 0).any():
            empty = np.flatnonzero(counts == 0)[:5].tolist()
            raise GroupingError(f"row_softmax: empty segments {empty}")
        present = None
    s = scores.value[:, 0]
    seg_max = np.full(n_segments, -np.inf, dtype=s.dtype)
    np.maximum.at(seg_max, seg, s)
    if present is not None:
        seg_max[~present] = 0.0
    ex = np.exp(s - seg_max[seg])
    denom = np.zeros(n_segments, dtype=s.dtype)
    np.add.at(denom, seg, ex)
    y = (ex / denom[seg])[:, None]
    out = _out(y, scores)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            gy = g[:, 0] * y[:, 0]
            dot = np.zeros(n_segments, dtype=s.dtype)
            np.add.at(dot, seg, gy)
            scores.accumulate((gy - y[:, 0] * dot[seg])[:, None])

        out.tape.record(back)
    return out


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax; returns 1 x 1."""
    t = np.asarray(targets, dtype=np.intp).reshape(-1)
    n, m = logits.shape
    if t.size != n:
        raise DimensionError(f"softmax_cross_entropy: {t.size} targets for {n} rows")
    if ((t < 0) | (t >= m)).any():
        bad = int(t[(t < 0) | (t >= m)][0])
        raise IndexError(f"target index {bad} outside [0, {m})")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = logsumexp - z[rows, t]
    out = _out(np.array([[nll.mean()]], dtype=logits.value.dtype), logits)
    if out.tape is not None:

        def back():
            if out.grad is None:
                return
            p = np.exp(z - logsumexp[:, None])
            p[rows, t] -= 1.0
            logits.accumulate(p * (out.grad[0, 0] / n))

        out.tape.record(back)
    return out


# ---------------------------------------------------------------------------
# recurrent cell


def gru_cell(h_prev: Tensor, x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """One gated-recurrent-unit step.

    ``params`` holds ``W_x`` (F x 3d), ``W_h`` (d x 3d), ``b_x`` and ``b_h``
    (1 x 3d); column blocks are ordered reset, update, candidate.

        r  = sig(x Wxr + bxr + h Whr + bhr)
        z  = sig(x Wxz + bxz + h Whz + bhz)
        n  = tanh(x Wxn + bxn + r * (h Whn + bhn))
        h' = (1 - z) * n + z * h
    """
    if h_prev.rows != x.rows:
        raise DimensionError(f"gru_cell: state {h_prev.shape} and input {x.shape} row counts differ")
    d = h_prev.cols
    if params["W_h"].shape != (d, 3 * d) or params["W_x"].shape != (x.cols, 3 * d):
        raise DimensionError(
            f"gru_cell: W_x {params['W_x'].shape}, W_h {params['W_h'].shape} for state width {d}"
        )
    gx = affine(x, params["W_x"], params["b_x"])
    gh = affine(h_prev, params["W_h"], params["b_h"])
    r = sigmoid(add(col_slice(gx, 0, d), col_slice(gh, 0, d)))
    z = sigmoid(add(col_slice(gx, d, 2 * d), col_slice(gh, d, 2 * d)))
    n = tanh(add(col_slice(gx, 2 * d, 3 * d), mul(r, col_slice(gh, 2 * d, 3 * d))))
    return add(mul(one_minus(z), n), mul(z, h_prev))


def gru_fold(h0: Tensor, messages: Sequence[Tensor], params: dict[str, Tensor]) -> Tensor:
    """Run ``gru_cell`` over a message sequence; an empty sequence returns ``h0``."""
    h = h0
    for m in messages:
        h = gru_cell(h, m, params)
    return h


# ---------------------------------------------------------------------------
# normalization / regularization


@dataclass
class BatchNormState:
    """Per-column running statistics; updated in place during train-mode calls."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, width: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros((1, width), dtype=dtype), np.ones((1, width), dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise DimensionError(f"batchnorm: gamma {gamma.shape} / beta {beta.shape} for input {x.shape}")
    eps = state.eps
    if train:
        mu = x.value.mean(axis=0, keepdims=True)
        var = x.value.var(axis=0, keepdims=True)
        n = x.rows
        unbiased = var * n / (n - 1) if n > 1 else var
        state.mean[...] = (1 - state.momentum) * state.mean + state.momentum * mu
        state.var[...] = (1 - state.momentum) * state.var + state.momentum * unbiased
    else:
        mu, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv_std
    out = _out(xhat * gamma.value + beta.value, x, gamma, beta)
    if out.tape is not None:

        def back():
            g = out.grad
            if g is None:
                return
            gamma.accumulate((g * xhat).sum(axis=0, keepdims=True))
            beta.accumulate(g.sum(axis=0, keepdims=True))
            gx = g * gamma.value
            if train:
                gx = inv_std * (
                    gx - gx.mean(axis=0, keepdims=True) - xhat * (gx * xhat).mean(axis=0, keepdims=True)
                )
            else:
                gx = gx * inv_std
            x.accumulate(gx)

        out.tape.record(back)
    return out


def dropout(x: Tensor, drop_rate: float, rng: np.random.Generator | int | None, train: bool) -> Tensor:
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    if not train or drop_rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = 1.0 - drop_rate
    mask = (rng.random(x.shape) < keep).astype(x.value.dtype) / keep
    out = _out(x.value * mask, x)
    if out.tape is not None:

        def back():
            if out.grad is not None:
                x.accumulate(out.grad * mask)

        out.tape.record(back)
    return out


def batchnorm_dropout(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    drop_rate: float,
    rng: np.random.Generator | int | None = None,
) -> Tensor:
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigError(f"drop_rate must lie in [0, 1), got {drop_rate}")
    train = mode == "train"
    return dropout(batchnorm(x, gamma, beta, state, train), drop_rate, rng, train)


# ---------------------------------------------------------------------------
# parameter storage


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True
    slots: dict[str, np.ndarray] = field(default_factory=dict)


class ParamStore:
    """Named 2-D parameters with gradient accumulators and optimizer slots.

    Non-trainable entries (batch-norm running statistics) live here too so a
    checkpoint captures everything the forward pass reads.
    """

    def __init__(self, dtype=np.float32) -> None:
        self.dtype = np.dtype(dtype)
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=self.dtype)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self._entries[name] = ParamEntry(value, np.zeros_like(value), trainable)
        return value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def names(self, trainable_only: bool = False) -> list[str]:
        return [n for n, e in self._entries.items() if e.trainable or not trainable_only]

    def items(self) -> Iterator[tuple[str, ParamEntry]]:
        return iter(self._entries.items())

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {n: e.value.shape for n, e in self._entries.items()}

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.grad.fill(0.0)

    def set_value(self, name: str, value: np.ndarray) -> None:
        e = self._entries[name]
        if value.shape != e.value.shape:
            raise DimensionError(f"parameter {name!r}: expected shape {e.value.shape}, got {value.shape}")
        e.value[...] = value

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(dtype)
        for n, e in self._entries.items():
            other.add(n, e.value, e.trainable)
        return other

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def total_size(self) -> int:
        return sum(e.value.size for e in self._entries.values())


class Binding:
    """Wraps ParamStore arrays as tape leaves for one forward pass.

    With ``tape=None`` the wrappers are constants and nothing is recorded.
    ``flush`` adds the leaf gradients into the store's accumulators.
    """

    def __init__(self, store: ParamStore, tape: Tape | None) -> None:
        self.store = store
        self.tape = tape
        self._leaves: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = Tensor(self.store[name], self.tape, name=name)
            self._leaves[name] = leaf
        return leaf

    def flush(self) -> None:
        for name, leaf in self._leaves.items():
            if leaf.grad is not None:
                self.store.entry(name).grad += leaf.grad


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / denom
