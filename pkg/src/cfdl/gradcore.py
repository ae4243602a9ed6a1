"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every operation returns a new :class:`Matrix`. When any input requires a
gradient, the output keeps references to its parents together with a closure
that pushes the upstream gradient back into them. :func:`backward` orders the
recorded graph topologically and runs the closures once each, in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Matrix",
    "Tape",
    "GradError",
    "ShapeError",
    "NonFiniteError",
    "matmul",
    "add",
    "add_n",
    "mul",
    "scale",
    "scale_rows",
    "linear",
    "relu",
    "mean_rows",
    "concat_cols",
    "stack_rows",
    "column",
    "row_dot",
    "sum_all",
    "softmax",
    "softmax_rows",
    "mse",
    "cosine_similarity",
    "cross_entropy",
    "dropout",
    "backward",
    "zero_grads",
]

COSINE_EPS = 1e-8


class GradError(RuntimeError):
    """Misuse of the differentiation machinery (bad root, double backward)."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Matrix:
    """A rows x cols float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got {arr.ndim}-D array")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite entry produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Matrix":
        return Matrix(self.data)

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)

    def __mul__(self, other) -> "Matrix":
        if isinstance(other, Matrix):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _accumulate(node: Matrix, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def _result(data: np.ndarray, parents: Sequence[Matrix], op: str,
            make_backward: Callable[[Matrix], Callable[[np.ndarray], None]]) -> Matrix:
    needs = any(p.requires_grad for p in parents)
    out = Matrix(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = make_backward(out)
    return out


def _shape_error(op: str, a: Matrix, b: Matrix) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _as_matrix(x) -> Matrix:
    return x if isinstance(x, Matrix) else Matrix(x)


# --- linear algebra -----------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise _shape_error("matmul", a, b)

    def mk(out):
        def bw(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        return bw

    return _result(a.data @ b.data, (a, b), "matmul", mk)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; ``b`` may be a 1 x cols row broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        def mk(out):
            def bw(g):
                _accumulate(a, g)
                _accumulate(b, g)
            return bw
    elif b.rows == 1 and b.cols == a.cols:
        def mk(out):
            def bw(g):
                _accumulate(a, g)
                _accumulate(b, g.sum(axis=0, keepdims=True))
            return bw
    else:
        raise _shape_error("add", a, b)
    return _result(a.data + b.data, (a, b), "add", mk)


def add_n(xs: Sequence[Matrix]) -> Matrix:
    if not xs:
        raise ValueError("add_n: empty list")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise _shape_error("add_n", xs[0], x)
    total = np.sum([x.data for x in xs], axis=0)

    def mk(out):
        def bw(g):
            for x in xs:
                _accumulate(x, g)
        return bw

    return _result(total, xs, "add_n", mk)


def mul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise _shape_error("mul", a, b)

    def mk(out):
        def bw(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        return bw

    return _result(a.data * b.data, (a, b), "mul", mk)


def scale(x: Matrix, c: float) -> Matrix:
    c = float(c)

    def mk(out):
        def bw(g):
            _accumulate(x, c * g)
        return bw

    return _result(c * x.data, (x,), "scale", mk)


def scale_rows(x: Matrix, w: Matrix) -> Matrix:
    """Multiply every row ``i`` of ``x`` by the scalar ``w[i, 0]``."""
    if w.cols != 1 or w.rows != x.rows:
        raise _shape_error("scale_rows", x, w)

    def mk(out):
        def bw(g):
            _accumulate(x, g * w.data)
            _accumulate(w, np.sum(g * x.data, axis=1, keepdims=True))
        return bw

    return _result(x.data * w.data, (x, w), "scale_rows", mk)


def linear(x: Matrix, W: Matrix, b: Matrix) -> Matrix:
    """Fully-connected layer ``x @ W + b`` with ``b`` broadcast over rows."""
    if x.cols != W.rows:
        raise _shape_error("linear", x, W)
    if b.shape != (1, W.cols):
        raise ShapeError(f"linear: bias must be (1, {W.cols}), got {b.shape}")

    def mk(out):
        def bw(g):
            _accumulate(x, g @ W.data.T)
            _accumulate(W, x.data.T @ g)
            _accumulate(b, g.sum(axis=0, keepdims=True))
        return bw

    return _result(x.data @ W.data + b.data, (x, W, b), "linear", mk)


# --- elementwise / structural ------------------------------------------


def relu(x: Matrix) -> Matrix:
    mask = x.data > 0

    def mk(out):
        def bw(g):
            _accumulate(x, g * mask)
        return bw

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", mk)


def mean_rows(xs: Sequence[Matrix]) -> Matrix:
    """Elementwise average of same-shape matrices."""
    if not xs:
        raise ValueError("mean_rows: empty list")
    for x in xs:
        if x.shape != xs[0].shape:
            raise _shape_error("mean_rows", xs[0], x)
    n = len(xs)
    avg = np.sum([x.data for x in xs], axis=0) / n

    def mk(out):
        def bw(g):
            share = g / n
            for x in xs:
                _accumulate(x, share)
        return bw

    return _result(avg, xs, "mean_rows", mk)


def concat_cols(xs: Sequence[Matrix]) -> Matrix:
    if not xs:
        raise ValueError("concat_cols: empty list")
    for x in xs:
        if x.rows != xs[0].rows:
            raise _shape_error("concat_cols", xs[0], x)
    bounds = np.cumsum([0] + [x.cols for x in xs])

    def mk(out):
        def bw(g):
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                _accumulate(x, g[:, lo:hi])
        return bw

    return _result(np.hstack([x.data for x in xs]), xs, "concat_cols", mk)


def stack_rows(xs: Sequence[Matrix]) -> Matrix:
    if not xs:
        raise ValueError("stack_rows: empty list")
    for x in xs:
        if x.cols != xs[0].cols:
            raise _shape_error("stack_rows", xs[0], x)
    bounds = np.cumsum([0] + [x.rows for x in xs])

    def mk(out):
        def bw(g):
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                _accumulate(x, g[lo:hi, :])
        return bw

    return _result(np.vstack([x.data for x in xs]), xs, "stack_rows", mk)


def column(x: Matrix, k: int) -> Matrix:
    if not 0 <= k < x.cols:
        raise IndexError(f"column {k} out of range for {x.shape}")

    def mk(out):
        def bw(g):
            full = np.zeros_like(x.data)
            full[:, k:k + 1] = g
            _accumulate(x, full)
        return bw

    return _result(x.data[:, k:k + 1], (x,), "column", mk)


def row_dot(a: Matrix, b: Matrix) -> Matrix:
    """Per-row inner products, returned as a rows x 1 column."""
    if a.shape != b.shape:
        raise _shape_error("row_dot", a, b)

    def mk(out):
        def bw(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)
        return bw

    return _result(np.sum(a.data * b.data, axis=1, keepdims=True), (a, b), "row_dot", mk)


def sum_all(x: Matrix) -> Matrix:
    def mk(out):
        def bw(g):
            _accumulate(x, np.full_like(x.data, g[0, 0]))
        return bw

    return _result(np.array([[x.data.sum()]]), (x,), "sum_all", mk)


# --- probabilistic ------------------------------------------------------


def _softmax_axis(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(v: Matrix) -> Matrix:
    """Softmax of an n x 1 column vector."""
    if v.cols != 1:
        raise ShapeError(f"softmax expects an n x 1 column, got {v.shape}")
    p = _softmax_axis(v.data, axis=0)

    def mk(out):
        def bw(g):
            _accumulate(v, p * (g - np.sum(g * p, axis=0, keepdims=True)))
        return bw

    return _result(p, (v,), "softmax", mk)


def softmax_rows(x: Matrix) -> Matrix:
    """Independent softmax over each row."""
    p = _softmax_axis(x.data, axis=1)

    def mk(out):
        def bw(g):
            _accumulate(x, p * (g - np.sum(g * p, axis=1, keepdims=True)))
        return bw

    return _result(p, (x,), "softmax_rows", mk)


def mse(a: Matrix, b: Matrix) -> Matrix:
    """Mean squared elementwise difference, as a 1x1 matrix."""
    if a.shape != b.shape:
        raise _shape_error("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def mk(out):
        def bw(g):
            d = (2.0 * g[0, 0] / n) * diff
            _accumulate(a, d)
            _accumulate(b, -d)
        return bw

    return _result(np.array([[np.mean(diff * diff)]]), (a, b), "mse", mk)


def cosine_similarity(a: Matrix, b: Matrix) -> Matrix:
    """Mean over rows of the row-wise cosine similarity.

    Each norm gets ``COSINE_EPS`` added before division, so zero rows yield 0.
    """
    if a.shape != b.shape:
        raise _shape_error("cosine_similarity", a, b)
    na = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    nb = np.sqrt(np.sum(b.data * b.data, axis=1, keepdims=True))
    da = na + COSINE_EPS
    db = nb + COSINE_EPS
    dot = np.sum(a.data * b.data, axis=1, keepdims=True)
    cs = dot / (da * db)
    rows = a.rows

    def mk(out):
        def bw(g):
            s = g[0, 0] / rows
            # d/da [a.b / ((|a|+e)(|b|+e))] = b/(da db) - cs * a / (|a| da)
            safe_na = np.where(na > 0, na, 1.0)
            safe_nb = np.where(nb > 0, nb, 1.0)
            ga = b.data / (da * db) - cs * a.data / (safe_na * da)
            gb = a.data / (da * db) - cs * b.data / (safe_nb * db)
            _accumulate(a, s * ga)
            _accumulate(b, s * gb)
        return bw

    return _result(np.array([[cs.mean()]]), (a, b), "cosine_similarity", mk)


def cross_entropy(logits: Matrix, labels) -> Matrix:
    """Mean negative log-softmax of the true class."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != logits.rows:
        raise ShapeError(f"cross_entropy: {y.shape[0]} labels for {logits.rows} rows")
    if y.size and (y.min() < 0 or y.max() >= logits.cols):
        raise ValueError(f"cross_entropy: label out of range [0, {logits.cols})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.sum(np.exp(z - zmax), axis=1))
    rows = np.arange(y.size)
    loss = np.mean(lse - z[rows, y])

    def mk(out):
        def bw(g):
            p = _softmax_axis(z, axis=1)
            p[rows, y] -= 1.0
            _accumulate(logits, (g[0, 0] / y.size) * p)
        return bw

    return _result(np.array([[loss]]), (logits,), "cross_entropy", mk)


def dropout(x: Matrix, p: float, train: bool, rng: np.random.Generator | None) -> Matrix:
    """Inverted dropout: survivors are scaled by 1/(1-p) in train mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def mk(out):
        def bw(g):
            _accumulate(x, g * keep)
        return bw

    return _result(x.data * keep, (x,), "dropout", mk)


# --- driver -------------------------------------------------------------


class Tape:
    """Topologically ordered nodes reachable from a root."""

    def __init__(self, root: Matrix):
        order: list[Matrix] = []
        seen: set[int] = set()
        stack: list[tuple[Matrix, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Matrix) -> None:
    if loss.shape != (1, 1):
        raise GradError(f"backward needs a scalar (1x1) root, got {loss.shape}")
    if loss._consumed:
        raise GradError("backward already ran on this graph; rebuild it or zero grads first")
    if not loss.requires_grad:
        raise GradError("loss does not depend on any matrix that requires grad")
    tape = Tape(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in tape.nodes:
        if node._backward is not None:
            # free interior buffers and closures; leaves keep their grads
            node.grad = None
            node._backward = None
            node._parents = ()
    loss._consumed = True


def zero_grads(params: Iterable[Matrix]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
