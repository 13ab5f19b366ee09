"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every primitive builds its output eagerly and, when any input requires a
gradient, records a closure mapping the upstream gradient to one gradient
per input. :func:`gradient` walks the recorded graph once in reverse
topological order.

Gradients with respect to inputs use the same machinery as parameters: wrap
the input in ``Tensor(x, requires_grad=True)``.
"""

import numpy as np

from fssd import kernels


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every differentiable leaf."""
        graph = trace(self)
        grads = gradient(self, graph.leaves)
        for leaf, g in grads.items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def _record(data, parents, backward, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


class Graph:
    """Nodes reachable from an output, inputs always before their consumers."""

    def __init__(self, nodes):
        self.nodes = nodes
        self.leaves = [n for n in nodes if n.is_leaf and n.requires_grad]

    def __len__(self):
        return len(self.nodes)


def trace(output):
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return Graph(order)


def gradient(output, wrt, seed=1.0):
    """Gradients of a scalar ``output`` with respect to the leaf tensors ``wrt``.

    Returns a dict keyed by the leaf tensors (identity hashed). Leaves that
    do not influence ``output`` map to zeros.
    """
    if output.size != 1:
        raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    for leaf in wrt:
        if not isinstance(leaf, Tensor) or not leaf.is_leaf or not leaf.requires_grad:
            raise ValueError(f"{leaf!r} is not a differentiable leaf of this graph")
    graph = trace(output)
    grads = {id(output): np.full(output.shape, float(seed))}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
        if g is None or node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return {leaf: grads.get(id(leaf), np.zeros(leaf.shape)).reshape(leaf.shape) for leaf in wrt}


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a if isinstance(a, Tensor) else None)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c):
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x):
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None):
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(out, (x,), back, "sum")


def mean(x, axis=None):
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis), 1.0 / count)


def l2_norm(v, axis=None):
    """Euclidean norm of the whole tensor, or of each slice along ``axis``.

    The gradient at a zero vector is taken to be zero.
    """
    out = np.sqrt(np.sum(v.data * v.data, axis=axis))

    def back(g):
        n = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, gg * v.data / safe, 0.0),)

    return _record(out, (v,), back, "l2_norm")


def global_avg_pool(x):
    """(n, c, h, w) -> (n, c) channel means."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (n, c, h, w), got {x.shape}")
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def pick(x, index):
    """Row-wise gather: out[i] = x[i, index[i]]."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick: matrix {x.shape} with index {index.shape}")
    rows = np.arange(x.shape[0])

    def back(g):
        full = np.zeros(x.shape)
        full[rows, index] = g
        return (full,)

    return _record(x.data[rows, index], (x,), back, "pick")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_bias(x, b):
    """Add a per-feature (2-D input) or per-channel (4-D input) bias."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: input {x.shape} and bias {b.shape} are incompatible")
    if x.ndim == 2:
        return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    return _record(
        x.data + b.data[None, :, None, None],
        (x, b),
        lambda g: (g, g.sum(axis=(0, 2, 3))),
        "add_bias",
    )


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of (n, c, h, w) input with (o, c, kh, kw) weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} are incompatible")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = kernels.im2col(xp, kh, kw, stride)
    oh, ow = cols.shape[1:3]
    w2 = w.data.reshape(o, -1)
    out = (cols.reshape(-1, cols.shape[-1]) @ w2.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (gm.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ w2).reshape(n, oh, ow, -1)
            dxp = kernels.col2im(dcols, xp.shape, kh, kw, stride)
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return dx, dw

    return _record(np.ascontiguousarray(out), (x, w), back, "conv2d")


def maxpool2d(x, k, stride=None):
    stride = k if stride is None else stride
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"maxpool2d: window {k} does not fit input {x.shape}")
    out, arg = kernels.maxpool_forward(x.data, k, stride)
    shape = x.shape
    return _record(out, (x,), lambda g: (kernels.maxpool_backward(g, arg, shape, k, stride),), "maxpool2d")


# ---------------------------------------------------------------- probabilities

def _log_softmax_array(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def log_softmax(x):
    if x.ndim != 2:
        raise ShapeError(f"log_softmax expects (n, classes), got {x.shape}")
    out = _log_softmax_array(x.data)
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax(x):
    if x.ndim != 2:
        raise ShapeError(f"softmax expects (n, classes), got {x.shape}")
    p = np.exp(_log_softmax_array(x.data))
    return _record(p, (x,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),), "softmax")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} and labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return scale(sum(pick(log_softmax(logits), labels)), -1.0 / logits.shape[0])
