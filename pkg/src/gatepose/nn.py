"""Module tree, parameter registry and the basic trainable layers.

Parameters are created eagerly from an explicit numpy Generator so that a
fixed seed reproduces the exact same initialization regardless of platform.
Weights draw from uniform(-b, b) with b = sqrt(1 / fan_in); layers that act
as gates or output projections can be zero-initialized instead.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, T.Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        arr = np.asarray(array, dtype=np.float64)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode=True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def count_params(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod):
        self._modules[str(len(self._items))] = mod
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng, shape, fan_in):
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, groups=1,
                 bias=True, zero_init=False, impl="im2col"):
        super().__init__()
        if cin % groups or cout % groups:
            raise ShapeError(
                f"Conv2d channels {cin}->{cout} not divisible by "
                f"groups={groups}")
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.impl = impl
        fan_in = (cin // groups) * k * k
        shape = (cout, cin // groups, k, k)
        if zero_init:
            w = np.zeros(shape)
        else:
            w = _uniform(rng, shape, fan_in)
        self.weight = T.Tensor(w, requires_grad=True)
        if bias:
            b = np.zeros(cout) if zero_init else _uniform(rng, (cout,), fan_in)
            self.bias = T.Tensor(b, requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups,
                        impl=self.impl)


class Deconv2d(Module):
    """Transposed convolution with weight layout (C_in, C_out, k, k)."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=0, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = cin * k * k
        self.weight = T.Tensor(_uniform(rng, (cin, cout, k, k), fan_in),
                               requires_grad=True)
        if bias:
            self.bias = T.Tensor(_uniform(rng, (cout,), fan_in),
                                 requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        return T.deconv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding)


class Linear(Module):
    """y = x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, cin, cout, rng, bias=True, zero_bias=False):
        super().__init__()
        self.weight = T.Tensor(_uniform(rng, (cin, cout), cin),
                               requires_grad=True)
        if bias:
            b = np.zeros(cout) if zero_bias else _uniform(rng, (cout,), cin)
            self.bias = T.Tensor(b, requires_grad=True)
        else:
            self.bias = None

    def forward(self, x):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = T.Tensor(np.ones(channels), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x):
        return T.batch_norm2d(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, self.training,
                              momentum=self.momentum, eps=self.eps)
