"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray; every differentiable op records a Node holding
the parent tensors and a vector-Jacobian closure. backward() linearizes the
graph reachable from a scalar loss into a Tape (topological order) and runs
each node's closure exactly once, accumulating gradients additively into
`.grad` of every grad-enabled tensor. Graphs are single-use: a second
backward through the same nodes raises, rebuild the graph instead.

Training runs in float32; gradient verification uses float64 graphs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    def __init__(self, op: str, shape_a, shape_b):
        super().__init__(f"{op}: operand shapes {tuple(shape_a)} and {tuple(shape_b)} do not conform")


_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One recorded operation: inputs precede outputs by construction."""

    __slots__ = ("op", "parents", "vjp", "done")

    def __init__(self, op: str, parents: Sequence["Tensor"], vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.parents = tuple(parents)
        self.vjp = vjp
        self.done = False


class Tape:
    """Topologically ordered nodes for one backward traversal."""

    def __init__(self, nodes: Sequence[Node]):
        self.nodes = list(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> Tape:
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # operator sugar; scalars are folded into the op closure
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce_min(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x), dtype=dtype)


def _record(op: str, out: Tensor, parents: Sequence[Tensor], vjp) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _check_elementwise(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a.data, b.data)
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a.data, b.data)
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a.data, b.data)
    out = Tensor(a.data * b.data)
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a.data, b.data)
    out = Tensor(a.data / b.data)
    return _record(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data ** p)
    return _record("pow", out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def squared_difference(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("squared_difference", a.data, b.data)
    d = a.data - b.data
    out = Tensor(d * d)
    return _record(
        "squared_difference", out, (a, b),
        lambda g: (_unbroadcast(2.0 * g * d, a.shape), _unbroadcast(-2.0 * g * d, b.shape)),
    )


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record("relu", out, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, slope * a.data))
    return _record("leaky_relu", out, (a,), lambda g: (g * np.where(mask, 1.0, slope),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record("exp", out, (a,), lambda g: (g * y,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record("log", out, (a,), lambda g: (g / a.data,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record("softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record("matmul", out, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def concatenate(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, ts, vjp)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", out, ts, vjp)


def gather(a, indices) -> Tensor:
    """Take rows (axis 0) with an integer index array of any shape.

    Differentiable through the gathered values; indices are constants and
    duplicates accumulate additively in the backward pass.
    """
    a = as_tensor(a)
    idx = np.asarray(indices)
    out = Tensor(np.take(a.data, idx, axis=0))

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx.reshape(-1), g.reshape((-1,) + a.data.shape[1:]))
        return (grad,)

    return _record("gather", out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions


def _reduction_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    axes = _reduction_axes(axis, a.data.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("reduce_sum", out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    axes = _reduction_axes(axis, a.data.ndim)
    count = math.prod(a.data.shape[ax] for ax in axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("reduce_mean", out, (a,), vjp)


def _reduce_extreme(a, axis, keepdims, kind: str) -> Tensor:
    a = as_tensor(a)
    fn = np.max if kind == "max" else np.min
    val = fn(a.data, axis=axis, keepdims=True)
    out = Tensor(val if keepdims else np.squeeze(val, axis=_reduction_axes(axis, a.data.ndim)))
    # subgradient: split evenly across ties, which matches the analytic
    # derivative everywhere off the tie set
    mask = (a.data == val)
    counts = mask.sum(axis=axis, keepdims=True)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, _reduction_axes(axis, a.data.ndim))
        return (mask * (g / counts),)

    return _record(f"reduce_{kind}", out, (a,), vjp)


def reduce_max(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(a, axis, keepdims, "max")


def reduce_min(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(a, axis, keepdims, "min")


# ---------------------------------------------------------------------------
# selection


def top_k(a, k: int, axis: int = -1):
    """Largest-k values (differentiable) and their indices (constant).

    Ties resolve to the smaller index. Returns (values, indices) with
    indices a plain ndarray.
    """
    a = as_tensor(a)
    if k > a.data.shape[axis]:
        raise AutodiffError(f"top_k: k={k} exceeds axis size {a.data.shape[axis]}")
    order = np.argsort(-a.data, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    values = np.take_along_axis(a.data, idx, axis=axis)
    out = Tensor(values)

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    return _record("top_k", out, (a,), vjp), idx


# ---------------------------------------------------------------------------
# segment ops (rasterization support)


def segment_prod(values, segment_ids, num_segments: int) -> Tensor:
    """Per-segment product of a 1-D tensor. Empty segments yield 1."""
    v = as_tensor(values)
    seg = np.asarray(segment_ids)
    data = v.data
    prod = np.ones(num_segments, dtype=data.dtype)
    np.multiply.at(prod, seg, data)
    out = Tensor(prod)

    zero = data == 0
    nzero = np.zeros(num_segments, dtype=np.int64)
    np.add.at(nzero, seg, zero.astype(np.int64))
    # product over each segment's nonzero entries, for the single-zero case
    nz_prod = np.ones(num_segments, dtype=data.dtype)
    np.multiply.at(nz_prod, seg, np.where(zero, 1.0, data))

    def vjp(g):
        gseg = g[seg]
        out_grad = np.empty_like(data)
        n_at = nzero[seg]
        safe = np.where(zero, 1.0, data)
        # no zeros in segment: prod / v_i; one zero: nz_prod at the zero, 0 elsewhere
        out_grad = np.where(
            n_at == 0,
            gseg * prod[seg] / safe,
            np.where((n_at == 1) & zero, gseg * nz_prod[seg], 0.0),
        )
        return (out_grad,)

    return _record("segment_prod", out, (v,), vjp)


def segment_min(values, segment_ids, num_segments: int, fill: float = 0.0) -> Tensor:
    """Per-segment minimum of a 1-D tensor; empty segments yield `fill`.

    The gradient routes to the first (lowest entry position) minimal
    element of each segment.
    """
    v = as_tensor(values)
    seg = np.asarray(segment_ids)
    data = v.data
    result = np.full(num_segments, np.inf, dtype=data.dtype)
    np.minimum.at(result, seg, data)
    empty = np.isinf(result)
    argmin = np.full(num_segments, -1, dtype=np.int64)
    is_min = data == result[seg]
    pos = np.arange(data.shape[0])
    # first minimal position per segment: reversed maximum.at keeps smallest
    first = np.full(num_segments, data.shape[0], dtype=np.int64)
    np.minimum.at(first, seg[is_min], pos[is_min])
    argmin = first
    out_data = np.where(empty, fill, result)
    out = Tensor(out_data)

    def vjp(g):
        grad = np.zeros_like(data)
        valid = ~empty
        grad[argmin[valid]] = g[valid]
        return (grad,)

    return _record("segment_min", out, (v,), vjp)


def scatter_add(values, indices, size: int) -> Tensor:
    """Scatter a 1-D tensor into a zero vector of length `size`, adding at
    duplicate indices."""
    v = as_tensor(values)
    idx = np.asarray(indices)
    data = np.zeros(size, dtype=v.data.dtype)
    np.add.at(data, idx, v.data)
    out = Tensor(data)
    return _record("scatter_add", out, (v,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# 2-D convolution (NCHW, im2col formulation)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (x.shape[2] - kh) // stride + 1
    wo = (x.shape[3] - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    shape = (b, c, kh, kw, ho, wo)
    strides = (s0, s1, s2, s3, s2 * stride, s3 * stride)
    cols = np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    x = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        x = x[:, :, padding:-padding, padding:-padding]
    return x


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on (B, C, H, W) with kernel (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, weight.shape)
    o, c, kh, kw = weight.data.shape
    b = x.data.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    cols = np.ascontiguousarray(cols)
    wmat = weight.data.reshape(o, -1)
    out_data = np.matmul(wmat, cols).reshape(b, o, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out_data = out_data + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)
    out = Tensor(out_data)

    def vjp(g):
        gmat = g.reshape(b, o, -1)
        # fold the batch into the reduction axis so both products hit BLAS
        gw = (gmat.transpose(1, 0, 2).reshape(o, -1)
              @ cols.transpose(0, 2, 1).reshape(-1, cols.shape[1])).reshape(weight.data.shape)
        gcols = np.matmul(wmat.T, gmat)
        gx = _col2im(gcols, x.data.shape, kh, kw, stride, padding)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _record("conv2d", out, parents, vjp)


# ---------------------------------------------------------------------------
# backward pass


def _linearize(loss: Tensor) -> Tape:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.node is not None and id(p.node) not in seen:
                stack.append((p.node, False))
    return Tape(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into .grad for every grad-enabled tensor
    reachable from `loss`. Returns the Tape that was traversed."""
    if loss.data.size != 1:
        raise AutodiffError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if not loss.requires_grad:
            raise AutodiffError("backward on a detached graph: loss does not require grad")
        loss.accumulate_grad(np.ones_like(loss.data))
        return Tape([])
    if loss.node.done:
        raise AutodiffError("backward already ran through this graph; rebuild it before differentiating again")

    tape = _linearize(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    outputs: dict[int, Tensor] = {id(loss.node): loss}
    # map each node to its output tensor by walking parents
    for node in tape.nodes:
        for p in node.parents:
            if p.node is not None:
                outputs[id(p.node)] = p

    for node in reversed(tape.nodes):
        if node.done:
            raise AutodiffError("graph shares nodes with an already-differentiated graph; rebuild it")
        node.done = True
        out_t = outputs[id(node)]
        g = grads.pop(id(out_t), None)
        if g is None:
            continue
        out_t.accumulate_grad(g)
        parent_grads = node.vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                p.accumulate_grad(pg)
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=p.data.dtype, copy=True)
    return tape


# ---------------------------------------------------------------------------
# numerical verification


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    of a scalar-valued function at `point` (evaluated in float64)."""
    x = Tensor(np.asarray(point, dtype=np.float64), requires_grad=True)
    loss = fn(x)
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            hi = float(fn(Tensor(x.data, dtype=np.float64)).data)
        flat[i] = orig - step
        with no_grad():
            lo = float(fn(Tensor(x.data, dtype=np.float64)).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
