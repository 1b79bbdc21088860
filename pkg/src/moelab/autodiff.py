"""Reverse-mode automatic differentiation on dense float64 arrays.

The engine records every operation on an append-only tape owned by a
``Graph``. Each node stores the ids of its parents and a closure mapping the
output gradient to gradients of those parents, so insertion order doubles as
a topological order and ``backward`` is a single reverse sweep that visits
each node exactly once. Gradients accumulate by summation when a node feeds
several consumers.

The op set is exactly what the routing laboratory needs: no general
broadcasting, no dtype promotion, everything float64. A graph lives for one
training step and is dropped afterwards.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, GradCheckError, ShapeError

Array = np.ndarray


class Tensor:
    """A float64 array bound to a node of a recording graph."""

    __slots__ = ("values", "node_id")

    def __init__(self, values: Array, node_id: int):
        self.values = values
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, node={self.node_id})"


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents: tuple[int, ...], vjp):
        self.parents = parents
        self.vjp = vjp


def _as_f64(values) -> Array:
    return np.asarray(values, dtype=np.float64)


def _sigmoid(x: Array) -> Array:
    # exp(-|x|) never overflows; the two branches share it
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


class Graph:
    """Append-only tape of operations plus per-node gradient buffers."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._grads: list[Array | None] | None = None

    def __len__(self) -> int:
        return len(self._nodes)

    # -- node creation -------------------------------------------------

    def _emit(self, values: Array, parents: Sequence[Tensor] = (), vjp=None) -> Tensor:
        node_id = len(self._nodes)
        self._nodes.append(_Node(tuple(p.node_id for p in parents), vjp))
        return Tensor(values, node_id)

    def constant(self, values) -> Tensor:
        """Leaf that participates in the forward pass only."""
        return self._emit(_as_f64(values))

    def parameter(self, values) -> Tensor:
        """Leaf wrapping a parameter buffer (no copy for float64 input)."""
        return self._emit(_as_f64(values))

    # -- elementwise ---------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return self._emit(a.values + b.values, (a, b), lambda g: (g, g))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
        return self._emit(a.values - b.values, (a, b), lambda g: (g, -g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        av, bv = a.values, b.values
        return self._emit(av * bv, (a, b), lambda g: (g * bv, g * av))

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit(a.values * c, (a,), lambda g: (g * c,))

    def scale_t(self, a: Tensor, s: Tensor) -> Tensor:
        """Multiply by a learnable scalar (0-d or single-element tensor)."""
        if s.size != 1:
            raise ShapeError(f"scale_t: scalar tensor expected, got shape {s.shape}")
        sv = float(s.values)
        av = a.values

        def vjp(g):
            return g * sv, np.sum(g * av).reshape(s.shape)

        return self._emit(av * sv, (a, s), vjp)

    def silu(self, a: Tensor) -> Tensor:
        """Sigmoid-gated linear unit x * sigmoid(x)."""
        sig = _sigmoid(a.values)
        av = a.values
        return self._emit(av * sig, (a,), lambda g: (g * sig * (1.0 + av * (1.0 - sig)),))

    def clamped_log(self, a: Tensor, floor: float = 1e-12) -> Tensor:
        """log(max(x, floor)); gradient is zero below the floor."""
        clamped = np.maximum(a.values, floor)
        inside = a.values >= floor
        return self._emit(np.log(clamped), (a,), lambda g: (np.where(inside, g / clamped, 0.0),))

    # -- linear algebra ------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        av, bv = a.values, b.values
        return self._emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def bmm(self, a: Tensor, b: Tensor) -> Tensor:
        """Batched matmul over the leading axis: [B,m,k] @ [B,k,n]."""
        if a.values.ndim != 3 or b.values.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
        av, bv = a.values, b.values
        return self._emit(
            av @ bv, (a, b), lambda g: (g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g)
        )

    def transpose(self, a: Tensor) -> Tensor:
        if a.values.ndim != 2:
            raise ShapeError(f"transpose: 2-d tensor expected, got {a.shape}")
        return self._emit(a.values.T, (a,), lambda g: (g.T,))

    def swap_last2(self, a: Tensor) -> Tensor:
        if a.values.ndim < 2:
            raise ShapeError(f"swap_last2: rank >= 2 expected, got {a.shape}")
        return self._emit(a.values.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),))

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        orig = a.shape
        return self._emit(a.values.reshape(shape), (a,), lambda g: (g.reshape(orig),))

    # -- gather / scatter ----------------------------------------------

    def gather_rows(self, a: Tensor, idx, unique: bool = False) -> Tensor:
        """Select rows by an integer index set; repeats accumulate in backward.

        Pass unique=True when the indices are known to be distinct; the
        backward pass then skips the slower accumulating scatter.
        """
        idx = np.asarray(idx, dtype=np.intp)
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            if unique:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return self._emit(a.values[idx], (a,), vjp)

    def embedding(self, table: Tensor, ids) -> Tensor:
        """Row lookup into an embedding table by token id."""
        return self.gather_rows(table, ids)

    def scatter_rows(self, a: Tensor, idx, num_rows: int) -> Tensor:
        """Place rows of `a` at positions `idx` in a zero matrix of `num_rows` rows."""
        idx = np.asarray(idx, dtype=np.intp)
        if a.values.ndim != 2:
            raise ShapeError(f"scatter_rows: 2-d tensor expected, got {a.shape}")
        out = np.zeros((num_rows, a.shape[1]))
        out[idx] = a.values
        return self._emit(out, (a,), lambda g: (g[idx],))

    def pick_per_row(self, a: Tensor, idx) -> Tensor:
        """Pick one column per row: out[j] = a[j, idx[j]]."""
        idx = np.asarray(idx, dtype=np.intp)
        rows = np.arange(a.shape[0])
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[rows, idx] = g
            return (out,)

        return self._emit(a.values[rows, idx], (a,), vjp)

    def take_rows_col(self, a: Tensor, rows, col: int) -> Tensor:
        """Read a single column at distinct rows: out[k] = a[rows[k], col]."""
        rows = np.asarray(rows, dtype=np.intp)
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[rows, col] = g
            return (out,)

        return self._emit(a.values[rows, col], (a,), vjp)

    # -- reductions ------------------------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._emit(np.sum(a.values), (a,), lambda g: (np.full(shape, g),))

    def mean(self, a: Tensor) -> Tensor:
        if a.size == 0:
            raise ShapeError("mean: empty tensor")
        shape, n = a.shape, a.size
        return self._emit(np.mean(a.values), (a,), lambda g: (np.full(shape, g / n),))

    def sum_rows(self, a: Tensor) -> Tensor:
        """Row sums of a 2-d tensor: [M,N] -> [M]."""
        if a.values.ndim != 2:
            raise ShapeError(f"sum_rows: 2-d tensor expected, got {a.shape}")
        shape = a.shape
        return self._emit(a.values.sum(axis=1), (a,), lambda g: (np.broadcast_to(g[:, None], shape),))

    def mul_rows(self, a: Tensor, w: Tensor) -> Tensor:
        """Scale each row of [M,N] by the matching entry of a length-M vector."""
        if a.values.ndim != 2 or w.values.ndim != 1 or a.shape[0] != w.shape[0]:
            raise ShapeError(f"mul_rows: incompatible shapes {a.shape}, {w.shape}")
        av, wv = a.values, w.values
        return self._emit(av * wv[:, None], (a, w), lambda g: (g * wv[:, None], np.sum(g * av, axis=1)))

    def div_rows(self, a: Tensor, d: Tensor) -> Tensor:
        """Divide each row of [M,N] by the matching entry of a length-M vector."""
        if a.values.ndim != 2 or d.values.ndim != 1 or a.shape[0] != d.shape[0]:
            raise ShapeError(f"div_rows: incompatible shapes {a.shape}, {d.shape}")
        av, dv = a.values, d.values
        out = av / dv[:, None]

        def vjp(g):
            return g / dv[:, None], -np.sum(g * av, axis=1) / (dv * dv)

        return self._emit(out, (a, d), vjp)

    def log_sum_exp_rows(self, a: Tensor) -> Tensor:
        """Stabilized log(sum(exp(row))) for each row of [M,N]."""
        if a.values.ndim != 2 or a.shape[1] < 1 or a.shape[0] < 1:
            raise ShapeError(f"log_sum_exp_rows: non-empty 2-d tensor expected, got {a.shape}")
        m = a.values.max(axis=1, keepdims=True)
        ex = np.exp(a.values - m)
        z = ex.sum(axis=1)
        soft = ex / z[:, None]
        return self._emit(m[:, 0] + np.log(z), (a,), lambda g: (soft * g[:, None],))

    # -- fused row transforms --------------------------------------------

    def softmax_rows(self, a: Tensor) -> Tensor:
        """Row-wise softmax, stabilized by per-row max subtraction."""
        if a.values.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ShapeError(f"softmax_rows: non-empty 2-d tensor expected, got {a.shape}")
        z = a.values - a.values.max(axis=1, keepdims=True)
        ex = np.exp(z)
        y = ex / ex.sum(axis=1, keepdims=True)
        return self._emit(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=1, keepdims=True)),))

    def standardize_rows(self, a: Tensor, eps: float = 1e-6) -> Tensor:
        """Per-row (x - mean) / (population std + eps).

        Constant rows map to zero thanks to eps; the gradient treats the
        mean and std as functions of the input.
        """
        if a.values.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise ShapeError(f"standardize_rows: non-empty 2-d tensor expected, got {a.shape}")
        if eps <= 0:
            raise ArgumentError(f"standardize_rows: eps must be positive, got {eps}")
        n = a.shape[1]
        mu = a.values.mean(axis=1, keepdims=True)
        c = a.values - mu
        sigma = np.sqrt(np.mean(c * c, axis=1, keepdims=True))
        s = sigma + eps
        y = c / s

        def vjp(g):
            gc = (g - g.mean(axis=1, keepdims=True)) / s
            proj = np.sum(g * y, axis=1, keepdims=True)
            safe_sigma = np.where(sigma > 0.0, sigma, 1.0)
            return (gc - np.where(sigma > 0.0, y * proj / (n * safe_sigma), 0.0),)

        return self._emit(y, (a,), vjp)

    # -- backward --------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Populate gradient buffers of every node reachable from `loss`.

        The loss must be a scalar. Unreached nodes keep a zero gradient
        (materialized lazily by `grad`).
        """
        if loss.values.shape != ():
            raise ShapeError(f"backward: scalar loss expected, got shape {loss.values.shape}")
        grads: list[Array | None] = [None] * len(self._nodes)
        grads[loss.node_id] = np.ones(())
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self._nodes[nid]
            if node.vjp is None:
                continue
            for pid, contrib in zip(node.parents, node.vjp(g)):
                if contrib is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = contrib
                else:
                    grads[pid] = grads[pid] + contrib
        self._grads = grads

    def grad(self, t: Tensor) -> Array:
        """Gradient of the last backward target w.r.t. `t` (zeros if unreached)."""
        if self._grads is None:
            raise ArgumentError("grad: backward has not been run on this graph")
        g = self._grads[t.node_id]
        if g is None:
            return np.zeros(t.shape)
        return np.asarray(g)


BuildFn = Callable[[Graph, list[Tensor]], Tensor]


def grad_check(f: BuildFn, params: list[Array], h: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    `f` builds the scalar loss on a fresh graph from the given parameter
    tensors; it is re-evaluated twice per parameter entry at +/- h. Returns
    the maximum over all entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-6 <= h <= 1e-4):
        raise ArgumentError(f"grad_check: h must lie in [1e-6, 1e-4], got {h}")
    params = [_as_f64(p).copy() for p in params]

    g = Graph()
    tensors = [g.parameter(p) for p in params]
    loss = f(g, tensors)
    if loss.values.shape != ():
        raise ShapeError("grad_check: f must return a scalar tensor")
    g.backward(loss)
    analytic = [g.grad(t) for t in tensors]

    def eval_at(pi: int, flat_j: int, delta: float) -> float:
        saved = params[pi].flat[flat_j]
        params[pi].flat[flat_j] = saved + delta
        gg = Graph()
        out = f(gg, [gg.parameter(p) for p in params])
        params[pi].flat[flat_j] = saved
        val = float(out.values)
        if not math.isfinite(val):
            raise GradCheckError(
                f"non-finite evaluation at param {pi}, entry {flat_j}, offset {delta:+g}"
            )
        return val

    worst = 0.0
    for pi, p in enumerate(params):
        for j in range(p.size):
            numeric = (eval_at(pi, j, h) - eval_at(pi, j, -h)) / (2.0 * h)
            a = float(analytic[pi].flat[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
