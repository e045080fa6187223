"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: 2-d matrices (plus rank-0/rank-1 results),
no broadcasting beyond the bias add inside ``linear``, and gradients that
accumulate until explicitly zeroed. Gradients with respect to *inputs* are a
first-class use case, not only parameter gradients.

Each backward() call propagates through a transient per-call flow buffer and
then adds the result into the persistent ``grad`` slots, so repeated calls
accumulate exactly one extra copy of the gradient per call.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import DataError, EmptyInputError, RankError, ShapeError

_ZERO_ROW_EPS = 1e-8


class Tensor:
    """A float64 array with an attached gradient slot and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_flow", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DataError("tensor created with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._flow = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _flow_add(self, g) -> None:
        if self._flow is None:
            self._flow = np.array(g, dtype=np.float64)
        else:
            self._flow = self._flow + g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor."""
        if self.data.shape != ():
            raise RankError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = trace(self)
        for node in order:
            node._flow = None
        self._flow = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._flow is None or node._backward is None:
                continue
            node._backward(node._flow)
        for node in order:
            if node.requires_grad and node._flow is not None:
                if node.grad is None:
                    node.grad = node._flow
                else:
                    node.grad = node.grad + node._flow
            node._flow = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        _check_same_shape("add", self, other)
        out = _make(self.data + other.data, (self, other), "add")

        def back(g):
            if self.requires_grad:
                self._flow_add(g)
            if other.requires_grad:
                other._flow_add(g)

        out._backward = back
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        _check_same_shape("sub", self, other)
        out = _make(self.data - other.data, (self, other), "sub")

        def back(g):
            if self.requires_grad:
                self._flow_add(g)
            if other.requires_grad:
                other._flow_add(-g)

        out._backward = back
        return out

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        _check_same_shape("mul", self, other)
        out = _make(self.data * other.data, (self, other), "mul")

        def back(g):
            if self.requires_grad:
                self._flow_add(g * other.data)
            if other.requires_grad:
                other._flow_add(g * self.data)

        out._backward = back
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self.scale(-1.0)

    def scale(self, s: float) -> "Tensor":
        out = _make(self.data * s, (self,), "scale")

        def back(g):
            if self.requires_grad:
                self._flow_add(g * s)

        out._backward = back
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul expects 2-d operands")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {self.data.shape} @ {other.data.shape}"
            )
        out = _make(self.data @ other.data, (self, other), "matmul")

        def back(g):
            if self.requires_grad:
                self._flow_add(g @ other.data.T)
            if other.requires_grad:
                other._flow_add(self.data.T @ g)

        out._backward = back
        return out

    def transpose(self) -> "Tensor":
        out = _make(self.data.T, (self,), "transpose")

        def back(g):
            if self.requires_grad:
                self._flow_add(g.T)

        out._backward = back
        return out

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def sum(self) -> "Tensor":
        out = _make(self.data.sum(), (self,), "sum")

        def back(g):
            if self.requires_grad:
                self._flow_add(np.full(self.data.shape, float(g)))

        out._backward = back
        return out

    def mean(self) -> "Tensor":
        return self.sum().scale(1.0 / self.data.size)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data, parents: tuple, op: str) -> Tensor:
    t = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"non-finite values produced by op '{op}'")
    t.data = arr
    t.grad = None
    t.requires_grad = any(p.requires_grad for p in parents)
    t._parents = parents
    t._backward = None
    t._flow = None
    t._op = op
    return t


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def trace(root: Tensor) -> list[Tensor]:
    """Topological order of the graph below ``root`` (parents before children)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    loss.backward()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# -- network operations -----------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with b broadcast over rows (the only broadcast allowed)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"linear expects x 2-d, w 2-d, b 1-d; got {x.data.shape}, {w.data.shape}, {b.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"linear inner dimensions disagree: x {x.data.shape} vs w {w.data.shape}"
        )
    if w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"linear bias length {b.data.shape} does not match w {w.data.shape}"
        )
    out = _make(x.data @ w.data + b.data, (x, w, b), "linear")

    def back(g):
        if x.requires_grad:
            x._flow_add(g @ w.data.T)
        if w.requires_grad:
            w._flow_add(x.data.T @ g)
        if b.requires_grad:
            b._flow_add(g.sum(axis=0))

    out._backward = back
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0
    out = _make(np.where(mask, x.data, 0.0), (x,), "relu")

    def back(g):
        if x.requires_grad:
            x._flow_add(g * mask)

    out._backward = back
    return out


def segment_argmax(data: np.ndarray, n_points: int) -> np.ndarray:
    """Global row index of the first per-feature max inside each segment."""
    rows, f = data.shape
    b = rows // n_points
    arg = np.argmax(data.reshape(b, n_points, f), axis=1)
    return arg + np.arange(b)[:, None] * n_points


def max_pool_points(features: Tensor) -> Tensor:
    """Per-feature max over the point axis of an N x F matrix.

    Backward routes each feature's gradient to the first-encountered argmax
    row (ties broken by lowest row index), keeping gradients deterministic.
    """
    if features.data.ndim != 2:
        raise ShapeError(f"max_pool_points expects N x F, got {features.data.shape}")
    if features.data.shape[0] == 0:
        raise EmptyInputError("max_pool_points on an empty point set")
    arg = np.argmax(features.data, axis=0)  # first max wins
    cols = np.arange(features.data.shape[1])
    out = _make(features.data[arg, cols], (features,), "max_pool_points")

    def back(g):
        if features.requires_grad:
            gx = np.zeros_like(features.data)
            gx[arg, cols] = g
            features._flow_add(gx)

    out._backward = back
    return out


def max_pool_segments(features: Tensor, n_points: int) -> Tensor:
    """Segment-wise max pool: (B*n_points) x F  ->  B x F.

    max_pool_points applied per contiguous block of n_points rows; used to
    batch equally sized clouds through one graph.
    """
    rows, f = features.data.shape
    if n_points < 1:
        raise EmptyInputError("segment size must be at least 1")
    if rows % n_points != 0:
        raise ShapeError(
            f"max_pool_segments: {rows} rows not divisible by segment {n_points}"
        )
    b = rows // n_points
    global_rows = segment_argmax(features.data, n_points)
    cols = np.broadcast_to(np.arange(f), (b, f))
    out = _make(features.data[global_rows, cols], (features,), "max_pool_segments")

    def back(g):
        if features.requires_grad:
            gx = np.zeros_like(features.data)
            gx[global_rows, cols] = g
            features._flow_add(gx)

    out._backward = back
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax on plain arrays (shared by the fused CE op)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-subtracted."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects B x C, got {logits.data.shape}")
    lab = np.asarray(labels, dtype=np.int64)
    b, c = logits.data.shape
    if lab.shape != (b,):
        raise ShapeError(f"labels shape {lab.shape} does not match batch {b}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(b), lab] - lse
    out = _make(-logp.mean(), (logits,), "softmax_cross_entropy")
    probs = softmax(logits.data)

    def back(g):
        if logits.requires_grad:
            gl = probs.copy()
            gl[np.arange(b), lab] -= 1.0
            logits._flow_add(gl * (float(g) / b))

    out._backward = back
    return out


def gather_labels(logits: Tensor, labels) -> Tensor:
    """Pick logits[b, labels[b]] as a length-B vector (differentiable)."""
    lab = np.asarray(labels, dtype=np.int64)
    b, c = logits.data.shape
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    rows = np.arange(b)
    out = _make(logits.data[rows, lab], (logits,), "gather_labels")

    def back(g):
        if logits.requires_grad:
            gl = np.zeros_like(logits.data)
            gl[rows, lab] = g
            logits._flow_add(gl)

    out._backward = back
    return out


def take_columns(w: Tensor, cols) -> Tensor:
    """Row b of the output is w[:, cols[b]]; repeated columns accumulate."""
    idx = np.asarray(cols, dtype=np.int64)
    out = _make(w.data[:, idx].T, (w,), "take_columns")

    def back(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            np.add.at(gw.T, idx, g)
            w._flow_add(gw)

    out._backward = back
    return out


def scatter_pool_rows(values: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place values[b, f] at (rows[b, f], f) of an n_rows x F zero matrix.

    Inverse routing of max_pool_segments; rows are pooled argmax indices, so
    positions never collide within a column of one segment.
    """
    b, f = values.data.shape
    cols = np.broadcast_to(np.arange(f), (b, f))
    data = np.zeros((n_rows, f), dtype=np.float64)
    np.add.at(data, (rows, cols), values.data)
    out = _make(data, (values,), "scatter_pool_rows")

    def back(g):
        if values.requires_grad:
            values._flow_add(g[rows, cols])

    out._backward = back
    return out


def select_rows(x: Tensor, rows) -> Tensor:
    idx = np.asarray(rows, dtype=np.int64)
    out = _make(x.data[idx], (x,), "select_rows")

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._flow_add(gx)

    out._backward = back
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = _make(x.data[:, start:stop], (x,), "slice_cols")

    def back(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            x._flow_add(gx)

    out._backward = back
    return out


def row_unit(x: Tensor) -> Tensor:
    """Normalize rows to unit length; rows with norm < 1e-8 map to zero."""
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    safe = norms >= _ZERO_ROW_EPS
    denom = np.where(safe, norms, 1.0)
    y = np.where(safe, x.data / denom, 0.0)
    out = _make(y, (x,), "row_unit")

    def back(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            gx = np.where(safe, (g - y * dot) / denom, 0.0)
            x._flow_add(gx)

    out._backward = back
    return out


def finite_difference_gradient(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float
) -> Tensor:
    """Central-difference gradient of a scalar-valued f, the test oracle.

    Evaluates f forward-only on perturbed copies, so it shares nothing with
    the backward rules it is used to check.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    src = base.reshape(-1)
    for i in range(src.size):
        bumped = src.copy()
        bumped[i] = src[i] + h
        fp = float(f(Tensor(bumped.reshape(base.shape))).data)
        bumped[i] = src[i] - h
        fm = float(f(Tensor(bumped.reshape(base.shape))).data)
        flat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)
