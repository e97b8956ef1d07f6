"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation creates a new :class:`Tensor` holding a
closure that pushes the upstream gradient into its parents. Calling
:meth:`Tensor.backward` on a result walks the recorded graph in reverse
topological order. The graph is released afterwards, so a second call
raises :class:`~focal3d.errors.StateError`.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from focal3d.errors import StateError, StructuralError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_released")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # graph traversal ------------------------------------------------------

    def backward(self, seed=1.0):
        """Accumulate d(self)/d(leaf) * seed into every reachable leaf's grad."""
        if self._released:
            raise StateError("graph already released by a previous backward()")
        if not self.requires_grad:
            raise StateError("backward() on a tensor that was not produced with gradient recording")
        order = _topological_order(self)
        grads = {id(self): np.broadcast_to(np.asarray(seed, dtype=DTYPE), self.shape).copy()}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise ----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def power(a, exponent):
    """``a ** exponent`` for a constant real exponent."""
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        if exponent == 0.0:
            return (np.zeros_like(a.data),)
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), backward)


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    mask = a.data > 0
    # written so NaN passes through instead of turning into 0
    return _make(np.where(a.data <= 0, 0.0, a.data), (a,), lambda g: (g * mask,))


def sigmoid(a):
    # split by sign so exp never overflows
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo, hi):
    """Clamp into [lo, hi]; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(mask, a, b):
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


def smooth_l1(a, beta=1.0):
    """Elementwise Huber penalty with its quadratic/linear transition at ``beta``."""
    d = a.data
    ad = np.abs(d)
    quad = ad < beta
    out = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    return _make(out, (a,), lambda g: (g * np.where(quad, d / beta, np.sign(d)),))


# reductions and shape -------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index):
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise StructuralError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise StructuralError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# segments (per-voxel point groups) ------------------------------------------

def segment_max(a, starts):
    """Row-wise max over contiguous segments of a 2-D tensor.

    ``starts`` holds the first row of each segment; segments must be nonempty.
    Ties route the gradient to the earliest row.
    """
    starts = np.asarray(starts, dtype=np.int64)
    out = np.maximum.reduceat(a.data, starts, axis=0)

    def backward(g):
        n = a.shape[0]
        seg = np.repeat(np.arange(len(starts)), np.diff(np.append(starts, n)))
        rows = np.where(a.data == out[seg], np.arange(n)[:, None], n)
        first = np.minimum.reduceat(rows, starts, axis=0)
        grad = np.zeros_like(a.data)
        cols = np.broadcast_to(np.arange(a.shape[1]), first.shape)
        grad[first, cols] = g
        return (grad,)

    return _make(out, (a,), backward)


def segment_broadcast(a, starts, n_rows):
    """Copy each segment's row of ``a`` to every row of that segment."""
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.diff(np.append(starts, n_rows))
    out = np.repeat(a.data, counts, axis=0)
    return _make(out, (a,), lambda g: (np.add.reduceat(g, starts, axis=0),))


def scatter_rows(a, flat_index, shape):
    """Write the rows of ``a`` (V, C) into a zero (C, prod(shape)) canvas.

    Returns a tensor of shape ``(C,) + shape`` flattened over ``shape`` at
    ``flat_index``. Indices must be unique.
    """
    flat_index = np.asarray(flat_index, dtype=np.int64)
    if len(np.unique(flat_index)) != len(flat_index):
        raise StructuralError("scatter_rows: duplicate destination indices")
    n_cells = int(np.prod(shape))
    canvas = np.zeros((a.shape[1], n_cells), dtype=DTYPE)
    canvas[:, flat_index] = a.data.T
    return _make(canvas.reshape((a.shape[1],) + tuple(shape)), (a,),
                 lambda g: (g.reshape(a.shape[1], n_cells)[:, flat_index].T,))


# convolution ----------------------------------------------------------------

def _window_slices(k_off, stride, out_size):
    return tuple(slice(k, k + s * (o - 1) + 1, s) for k, s, o in zip(k_off, stride, out_size))


def _conv_out_size(in_size, kernel, stride, pad):
    return tuple((i + 2 * p - k) // s + 1 for i, k, s, p in zip(in_size, kernel, stride, pad))


def _im2col(xp, kernel, stride, out_size):
    """(N, C, *S) padded input -> (C * prod(kernel), N * prod(out)) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c,) + tuple(kernel) + (n,) + tuple(out_size), dtype=DTYPE)
    xt = xp.swapaxes(0, 1)
    for k_off in itertools.product(*(range(k) for k in kernel)):
        cols[(slice(None),) + k_off] = xt[(slice(None), slice(None)) + _window_slices(k_off, stride, out_size)]
    return cols.reshape(c * int(np.prod(kernel)), n * int(np.prod(out_size)))


def _col2im(dcols, padded_shape, kernel, stride, out_size):
    n, c = padded_shape[:2]
    dcols = dcols.reshape((c,) + tuple(kernel) + (n,) + tuple(out_size))
    dxt = np.zeros((c, n) + tuple(padded_shape[2:]), dtype=DTYPE)
    for k_off in itertools.product(*(range(k) for k in kernel)):
        dxt[(slice(None), slice(None)) + _window_slices(k_off, stride, out_size)] += dcols[(slice(None),) + k_off]
    return dxt.swapaxes(0, 1)


def _pad(x, pad):
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _unpad(x, pad):
    if not any(pad):
        return x
    return x[(slice(None), slice(None)) + tuple(slice(p, x.shape[2 + i] - p) for i, p in enumerate(pad))]


def _to_rows(g):
    """(N, C, *S) -> contiguous (C, N * prod(S))."""
    return np.ascontiguousarray(g.swapaxes(0, 1)).reshape(g.shape[1], -1)


def _from_rows(m, n, size):
    """(C, N * prod(S)) -> (N, C, *S) view."""
    return m.reshape((m.shape[0], n) + tuple(size)).swapaxes(0, 1)


def _conv_core(x, w, stride, pad):
    """Plain strided convolution on arrays; returns output and cached patches."""
    kernel = w.shape[2:]
    xp = _pad(x, pad)
    out_size = _conv_out_size(x.shape[2:], kernel, stride, pad)
    if any(o < 1 for o in out_size):
        raise StructuralError(f"convolution output would be empty: input {x.shape[2:]}, kernel {kernel}")
    cols = _im2col(xp, kernel, stride, out_size)
    out = w.reshape(w.shape[0], -1) @ cols
    return _from_rows(out, x.shape[0], out_size), cols, xp.shape, out_size


def _conv_input_grad(g, w, padded_shape, stride, pad, out_size):
    dcols = w.reshape(w.shape[0], -1).T @ _to_rows(g)
    return _unpad(_col2im(dcols, padded_shape, w.shape[2:], stride, out_size), pad)


def _conv_weight_grad(g, cols, w_shape, out_size):
    return (_to_rows(g) @ cols.T).reshape(w_shape)


def conv(x, w, b=None, stride=1, padding=0):
    """N-d cross-correlation, layout (N, C, *spatial), weight (C_out, C_in, *kernel)."""
    nd = w.ndim - 2
    stride = _tuple(stride, nd)
    pad = _tuple(padding, nd)
    if x.ndim != nd + 2 or x.shape[1] != w.shape[1]:
        raise StructuralError(f"conv input {x.shape} does not match weight {w.shape}")
    out, cols, padded_shape, out_size = _conv_core(x.data, w.data, stride, pad)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * nd)

    def backward(g):
        gx = _conv_input_grad(g, w.data, padded_shape, stride, pad, out_size) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, w.shape, out_size)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + nd)))

    return _make(out, parents, backward)


def conv_transpose(x, w, b=None, stride=1, padding=0):
    """Transposed convolution; weight layout (C_in, C_out, *kernel).

    Output extent per axis is ``(in - 1) * stride + kernel - 2 * padding``;
    ``padding`` crops symmetrically from the full transposed output.
    """
    nd = w.ndim - 2
    stride = _tuple(stride, nd)
    pad = _tuple(padding, nd)
    kernel = w.shape[2:]
    if x.ndim != nd + 2 or x.shape[1] != w.shape[0]:
        raise StructuralError(f"conv_transpose input {x.shape} does not match weight {w.shape}")
    in_size = x.shape[2:]
    full = tuple((i - 1) * s + k for i, s, k in zip(in_size, stride, kernel))
    out_size = tuple(f - 2 * p for f, p in zip(full, pad))
    if any(o < 1 for o in out_size):
        raise StructuralError(f"conv_transpose output would be empty for input {in_size}")
    padded_shape = (x.shape[0], w.shape[1]) + full
    out = _conv_input_grad(x.data, w.data, padded_shape, stride, pad, in_size)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        cols = _im2col(_pad(g, pad), kernel, stride, in_size)
        gx = None
        if x.requires_grad:
            gx = _from_rows(w.data.reshape(w.shape[0], -1) @ cols, x.shape[0], in_size)
        gw = _conv_weight_grad(x.data, cols, w.shape, in_size)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0,) + tuple(range(2, 2 + nd)))

    return _make(out, parents, backward)


def _tuple(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise StructuralError(f"expected {n} entries, got {tuple(v)}")
        return tuple(int(e) for e in v)
    return (int(v),) * n


# normalization --------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel normalization over every axis but axis 1.

    In training mode batch statistics are used and the running buffers
    (numpy arrays) are updated in place as ``momentum * old + (1 - momentum) * new``.
    For 2-D input (rows of points) batch sums run over sorted values, so the
    statistics do not depend on the order of the rows.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        m = x.size // x.shape[1]
        if x.ndim == 2:
            mu = np.sort(x.data, axis=0).sum(axis=0) / m
            var = np.sort((x.data - mu) ** 2, axis=0).sum(axis=0) / m
        else:
            mu = x.data.mean(axis=axes)
            var = ((x.data - mu.reshape(shape)) ** 2).mean(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
        m = None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            dx = (inv.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
            )
        else:
            dx = dxhat * inv.reshape(shape)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward)
