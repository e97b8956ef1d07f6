"""Parameterized layers on top of the autodiff core."""

from __future__ import annotations

import numpy as np

from focal3d.errors import DomainError
from focal3d.network import tensor as T

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Module:
    """Minimal container: named parameters, named buffers, train/eval flag."""

    def __init__(self):
        self.training = True
        self._children = {}

    def add(self, name, module):
        self._children[name] = module
        return module

    def own_parameters(self):
        return {}

    def own_buffers(self):
        return {}

    def parameters(self, prefix=""):
        out = {prefix + k: v for k, v in self.own_parameters().items()}
        for name, child in self._children.items():
            out.update(child.parameters(f"{prefix}{name}."))
        return out

    def buffers(self, prefix=""):
        out = {prefix + k: v for k, v in self.own_buffers().items()}
        for name, child in self._children.items():
            out.update(child.buffers(f"{prefix}{name}."))
        return out

    def state(self):
        """Every parameter and buffer as a plain array, keyed by dotted name."""
        st = {k: v.data for k, v in self.parameters().items()}
        st.update(self.buffers())
        return st

    def load_state(self, state):
        params = self.parameters()
        bufs = self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise DomainError(f"state is missing entries: {sorted(missing)[:5]}")
        for k, p in params.items():
            p.data = np.array(state[k], dtype=T.DTYPE).reshape(p.shape)
        for k, b in bufs.items():
            b[...] = np.asarray(state[k]).reshape(b.shape)

    def train(self, flag=True):
        self.training = flag
        for child in self._children.values():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    """N-d convolution with bias; ``transposed`` selects the deconvolution."""

    def __init__(self, rng, nd, c_in, c_out, kernel, stride=1, padding=None, transposed=False, name=None):
        super().__init__()
        self.nd = nd
        self.kernel = T._tuple(kernel, nd)
        self.stride = T._tuple(stride, nd)
        if padding is None:
            padding = tuple((k - s) // 2 for k, s in zip(self.kernel, self.stride)) if transposed \
                else tuple(k // 2 for k in self.kernel)
        self.padding = T._tuple(padding, nd)
        self.transposed = transposed
        self.c_in, self.c_out = c_in, c_out
        self.name = name
        k = int(np.prod(self.kernel))
        if transposed:
            shape = (c_in, c_out) + self.kernel
            fan_in = c_in * k // int(np.prod(self.stride))
        else:
            shape = (c_out, c_in) + self.kernel
            fan_in = c_in * k
        self.weight = T.Tensor(he_uniform(rng, shape, fan_in), requires_grad=True)
        self.bias = T.Tensor(np.zeros(c_out), requires_grad=True)

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_size(self, in_size):
        if self.transposed:
            return tuple((i - 1) * s + k - 2 * p
                         for i, s, k, p in zip(in_size, self.stride, self.kernel, self.padding))
        return T._conv_out_size(in_size, self.kernel, self.stride, self.padding)

    def forward(self, x):
        fn = T.conv_transpose if self.transposed else T.conv
        return fn(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng, c_in, c_out):
        super().__init__()
        self.weight = T.Tensor(he_uniform(rng, (c_in, c_out), c_in), requires_grad=True)
        self.bias = T.Tensor(np.zeros(c_out), requires_grad=True)

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return T.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    """Per-channel batch normalization over axis 1."""

    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        self.gamma = T.Tensor(np.ones(channels), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum, self.eps = momentum, eps

    def own_parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class ConvBlock(Module):
    """Convolution, ReLU, batch norm, in that order."""

    def __init__(self, rng, nd, c_in, c_out, kernel, stride=1, padding=None, transposed=False, name=None):
        super().__init__()
        self.conv = self.add("conv", Conv(rng, nd, c_in, c_out, kernel, stride, padding, transposed, name))
        self.bn = self.add("bn", BatchNorm(c_out))
        self.name = name

    def out_size(self, in_size):
        return self.conv.out_size(in_size)

    def forward(self, x):
        return self.bn(T.relu(self.conv(x)))


class FCBlock(Module):
    """Fully connected layer, batch norm, ReLU (point rows as the batch axis)."""

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        self.fc = self.add("fc", Linear(rng, c_in, c_out))
        self.bn = self.add("bn", BatchNorm(c_out))

    def forward(self, x):
        return T.relu(self.bn(self.fc(x)))


class VFE(Module):
    """Voxel feature encoding.

    Point rows pass through an FC block to ``c_out // 2`` features; the
    element-wise max over each voxel's rows is appended back to every row.
    """

    def __init__(self, rng, c_in, c_out):
        super().__init__()
        if c_out % 2:
            raise DomainError(f"VFE output width must be even, got {c_out}")
        self.block = self.add("block", FCBlock(rng, c_in, c_out // 2))
        self.c_out = c_out

    def forward(self, rows, starts):
        pointwise = self.block(rows)
        pooled = T.segment_max(pointwise, starts)
        return T.concat([pointwise, T.segment_broadcast(pooled, starts, rows.shape[0])], axis=1)


def vfe_layer(rows, vfe):
    """Encode one voxel: run ``vfe`` over its point rows and max-pool the result.

    ``vfe`` is a :class:`VFE` or :class:`FCBlock`. Returns a ``(c_out,)`` tensor.
    """
    rows = T.as_tensor(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise DomainError("vfe_layer needs at least one point row")
    starts = np.zeros(1, dtype=np.int64)
    out = vfe(rows, starts) if isinstance(vfe, VFE) else vfe(rows)
    return T.segment_max(out, starts).reshape(out.shape[1])
