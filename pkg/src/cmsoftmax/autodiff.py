"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Node` wraps a value array and, once :func:`backward` has run, the
gradient of a scalar loss with respect to that value.  Every primitive below
builds a new node that remembers its parents and a closure mapping the
output gradient to one gradient per parent.

Example::

    >>> x = variable([[1.0, 2.0]])
    >>> w = variable([[3.0], [4.0]])
    >>> y = sum_all(x @ w)
    >>> backward(y)
    >>> x.grad
    array([[3., 4.]])
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, DimensionError, NumericError

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "op", "_backward", "requires_grad")

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        op: str = "leaf",
        backward_fn: BackwardFn | None = None,
        requires_grad: bool | None = None,
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.op = op
        self._backward = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)


class Parameter(Node):
    """A trainable leaf with a name unique inside its model."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def variable(value) -> Node:
    return Node(np.array(value, dtype=DTYPE), requires_grad=True)


def constant(value) -> Node:
    return Node(np.array(value, dtype=DTYPE), requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def custom_op(value, parents: Iterable[Node], backward_fn: BackwardFn, op: str) -> Node:
    """Register a primitive defined outside this module."""
    return Node(value, tuple(parents), op, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Node, b: Node, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), "add", back)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Node(a.value - b.value, (a, b), "sub", back)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")

    def back(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return Node(a.value * b.value, (a, b), "mul", back)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "div")
    out = a.value / b.value

    def back(g):
        ga = _unbroadcast(g / b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None
        return ga, gb

    return Node(out, (a, b), "div", back)


def power(x, exponent: float) -> Node:
    x = as_node(x)

    def back(g):
        return (g * exponent * x.value ** (exponent - 1),)

    return Node(x.value**exponent, (x,), "pow", back)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow for large |x|."""
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Node:
    x = as_node(x)
    s = sigmoid_array(x.value)

    def back(g):
        return (g * s * (1.0 - s),)

    return Node(s, (x,), "sigmoid", back)


def relu(x) -> Node:
    return prelu(x, 0.0)


def prelu(x, slope: float) -> Node:
    """max(0, x) generalised with a fixed negative-side slope.

    The kink at 0 takes the positive branch, so the subgradient there is 1.
    """
    if not np.isfinite(slope):
        raise ValueError(f"prelu slope must be finite, got {slope}")
    x = as_node(x)
    positive = x.value >= 0
    out = np.where(positive, x.value, slope * x.value)

    def back(g):
        return (np.where(positive, g, slope * g),)

    return Node(out, (x,), "relu" if slope == 0.0 else "prelu", back)


def activation(x, kind: str = "relu", slope: float = 0.25) -> Node:
    if kind == "relu":
        return relu(x)
    if kind == "prelu":
        return prelu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


def clip(x, lo: float, hi: float) -> Node:
    x = as_node(x)
    inside = (x.value >= lo) & (x.value <= hi)

    def back(g):
        return (np.where(inside, g, 0.0),)

    return Node(np.clip(x.value, lo, hi), (x,), "clip", back)


# --------------------------------------------------------------------------
# shape and reductions
# --------------------------------------------------------------------------


def reshape(x, shape: Sequence[int]) -> Node:
    x = as_node(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def back(g):
        return (g.reshape(x.shape),)

    return Node(out, (x,), "reshape", back)


def flatten(x) -> Node:
    x = as_node(x)
    return reshape(x, (x.shape[0], -1))


def transpose(x) -> Node:
    x = as_node(x)
    if x.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def back(g):
        return (g.T,)

    return Node(x.value.T.copy(), (x,), "transpose", back)


def sum_all(x) -> Node:
    x = as_node(x)

    def back(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Node(x.value.sum(), (x,), "sum", back)


def mean_all(x) -> Node:
    x = as_node(x)
    n = x.value.size

    def back(g):
        return (np.full(x.shape, g / n),)

    return Node(x.value.mean(), (x,), "mean", back)


# --------------------------------------------------------------------------
# linear algebra and convolution
# --------------------------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb

    return Node(a.value @ b.value, (a, b), "matmul", back)


def row_l2_norm(x) -> Node:
    """Euclidean norm of each row; rows of zeros get norm 0 and gradient 0."""
    x = as_node(x)
    if x.value.ndim != 2:
        raise DimensionError(f"row_l2_norm expects [n x d], got shape {x.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", x.value, x.value))

    def back(g):
        safe = np.where(norms > 0, norms, 1.0)
        unit = np.where((norms > 0)[:, None], x.value / safe[:, None], 0.0)
        return (g[:, None] * unit,)

    return Node(norms, (x,), "row_l2_norm", back)


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is [n, c_in, h, w] and ``kernel`` is [c_out, c_in, kh, kw].
    """
    x, kernel = as_node(x), as_node(kernel)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    if x.value.ndim != 4 or kernel.value.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D operands, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d: input {x.shape} has {c_in} channels, kernel {kernel.shape} expects {k_in}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kernel.shape} larger than padded input {(n, c_in, hp, wp)}"
        )
    xp = x.value
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: [n, c_in, oh, ow, kh, kw]
    out = np.tensordot(windows, kernel.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def back(g):
        gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, kernel.value, axes=([1], [0]))  # [n, oh, ow, c_in, kh, kw]
            gxp = np.zeros((n, c_in, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gk

    return Node(np.ascontiguousarray(out), (x, kernel), "conv2d", back)


def max_pool2d(x, size: int = 2) -> Node:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_node(x)
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise DimensionError(f"max_pool2d: window {size} larger than input {x.shape}")
    crop = x.value[:, :, : oh * size, : ow * size]
    blocks = crop.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size)
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[:, :, : oh * size, : ow * size] = gb
        return (gx,)

    return Node(out, (x,), "max_pool2d", back)


# --------------------------------------------------------------------------
# loss primitive
# --------------------------------------------------------------------------


def softmax_cross_entropy(logits, labels) -> tuple[Node, np.ndarray]:
    """Batch-mean cross entropy of row-wise softmax.

    Returns the scalar loss node and the [m x c] softmax probabilities.
    The gradient w.r.t. logit (i, j) is (P_ij - [j == y_i]) / m.
    """
    logits = as_node(logits)
    if logits.value.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [m x c] logits, got {logits.shape}")
    m, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (m,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch size {m}")
    if m and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise IndexError(f"label {bad} out of range for {c} classes")
    z = logits.value
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - logsumexp[:, None]
    probs = np.exp(log_probs)
    rows = np.arange(m)
    loss = -log_probs[rows, labels].mean()

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (g / m),)

    return Node(loss, (logits,), "softmax_xent", back), probs


# --------------------------------------------------------------------------
# backward pass and finite-difference oracle
# --------------------------------------------------------------------------


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node reachable from the scalar ``loss``.

    Gradients from previous calls are discarded; fan-out accumulates additively.
    """
    if loss.value.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.value)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or not node.requires_grad:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is not None and parent.requires_grad:
                parent.grad += g


def grad_check(
    f: Callable[..., Node],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    skip: Callable[[int, tuple[int, ...]], bool] | None = None,
) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` receives one node per input and returns a scalar node.  Relative
    error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    base = [np.array(x, dtype=DTYPE) for x in inputs]
    nodes = [variable(x) for x in base]
    out = f(*nodes)
    backward(out)
    analytic = [n.grad.copy() for n in nodes]

    def evaluate(arrays):
        val = float(f(*[constant(a) for a in arrays]).value)
        if not np.isfinite(val):
            raise NumericError("non-finite value while probing finite differences")
        return val

    worst = 0.0
    for k, x in enumerate(base):
        for idx in np.ndindex(x.shape):
            if skip is not None and skip(k, idx):
                continue
            probe = [a.copy() for a in base]
            probe[k][idx] = x[idx] + h
            up = evaluate(probe)
            probe[k][idx] = x[idx] - h
            down = evaluate(probe)
            numeric = (up - down) / (2 * h)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
