"""Parameter containers built on the primitives in :mod:`viewfuse.nn.ops`."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Minimal parameter/buffer bookkeeping.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    numpy arrays listed in ``_buffer_names``; child modules are attributes
    (or lists of modules). Names follow attribute insertion order, so
    ``state_dict`` ordering is stable.
    """

    _buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()
        for name, b in bufs.items():
            b[...] = state[name]

    def astype(self, dtype):
        """Cast parameters and buffers in place (f64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, cin, cout, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.weight = kaiming_uniform(rng, (cin, cout), cin, dtype)
        self.bias = zeros_param((cout,), dtype) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, axis=-1, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((channels,), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.axis = axis
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.axis, self.momentum, self.eps)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, bias=True, dtype=np.float32):
        super().__init__()
        fan_in = cin * kernel * kernel
        self.weight = kaiming_uniform(rng, (kernel, kernel, cin, cout), fan_in, dtype)
        self.bias = zeros_param((cout,), dtype) if bias else None

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.weight = kaiming_uniform(rng, (cin, 2, 2, cout), cin, dtype)
        self.bias = zeros_param((cout,), dtype)

    def __call__(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias)


class SharedMLP(Module):
    """Per-point stack of linear layers over the last axis.

    With ``bn`` every layer is linear -> BN -> ReLU; without it, linear -> ReLU.
    ``last_relu=False`` leaves the final layer purely linear.
    """

    def __init__(self, channels, rng, bn=True, last_relu=True, dtype=np.float32):
        super().__init__()
        self.layers = []
        self.norms = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.layers.append(Linear(cin, cout, rng, bias=not bn, dtype=dtype))
            if bn:
                self.norms.append(BatchNorm(cout, axis=-1, dtype=dtype))
        self.bn = bn
        self.last_relu = last_relu
        self.out_channels = channels[-1]

    def __call__(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.bn:
                x = self.norms[i](x)
            if i < n - 1 or self.last_relu:
                x = ops.relu(x)
        return x
