"""Stateful layers built on :mod:`cgnet.ops`.

A layer owns references to parameters registered in a shared
:class:`ParamStore`. ``forward(x, train)`` caches what ``backward`` needs when
``train`` is true; ``backward(grad)`` accumulates parameter gradients into the
store and returns the gradient with respect to the layer input.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import rand_normal, scale_channels

RUNNING_MEAN = ".running_mean"
RUNNING_VAR = ".running_var"


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    decay: bool = True


@dataclass
class ParamStore:
    """Insertion-ordered learnable tensors plus BN running statistics."""

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def add(self, name, value, decay=True):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate tensor name {name!r}")
        p = Param(np.ascontiguousarray(value), np.zeros_like(value), decay)
        self.params[name] = p
        return p

    def add_buffer(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate tensor name {name!r}")
        self.buffers[name] = np.ascontiguousarray(value)
        return self.buffers[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0

    def num_params(self):
        return sum(p.value.size for p in self.params.values())

    def tensors(self):
        """All stored tensors (parameters then buffers) by name."""
        out = {name: p.value for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_tensors(self, tensors):
        """Copy values in place; every stored name must be present with matching dims."""
        for name, dst in self.tensors().items():
            if name not in tensors:
                raise KeyError(f"missing tensor {name!r}")
            src = tensors[name]
            if src.shape != dst.shape:
                raise ShapeError(f"tensor {name!r}: stored {src.shape}, model {dst.shape}")
            dst[...] = src


class Layer:
    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def flops(self, shape):
        """Returns ``(ops, output_shape)`` for an input of ``shape``."""
        raise NotImplementedError

    def _saved(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a train-mode forward")
        return self._cache


class Conv2d(Layer):
    def __init__(self, store, name, spec, rng, dtype=np.float32):
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel_h * spec.kernel_w
        w = rand_normal(rng, spec.weight_shape, 0.0, math.sqrt(2.0 / fan_in), dtype)
        self.weight = store.add(name + ".weight", w)
        self.bias = store.add(name + ".bias", np.zeros(spec.out_channels, dtype)) if spec.has_bias else None
        self._cache = None

    def forward(self, x, train=False):
        b = self.bias.value if self.bias is not None else None
        self._cache = x if train else None
        return ops.conv2d_forward(x, self.weight.value, b, self.spec)

    def backward(self, grad):
        x = self._saved()
        gx, gw, gb = ops.conv2d_backward(grad, x, self.weight.value, self.spec)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        self._cache = None
        return gx

    def flops(self, shape):
        s = self.spec
        ho, wo = s.output_hw(shape[2], shape[3])
        out = ho * wo * s.out_channels
        n = 2 * out * (s.in_channels // s.groups) * s.kernel_h * s.kernel_w
        if s.has_bias:
            n += out
        return n, (shape[0], s.out_channels, ho, wo)


class BatchNorm2d(Layer):
    def __init__(self, store, name, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        self.gamma = store.add(name + ".gamma", np.ones(channels, dtype), decay=False)
        self.beta = store.add(name + ".beta", np.zeros(channels, dtype), decay=False)
        self.running_mean = store.add_buffer(name + RUNNING_MEAN, np.zeros(channels, dtype))
        self.running_var = store.add_buffer(name + RUNNING_VAR, np.ones(channels, dtype))
        self.eps, self.momentum = eps, momentum
        self._cache = None

    def _state(self, mode):
        return ops.BatchNormState(self.gamma.value, self.beta.value, self.running_mean,
                                  self.running_var, self.eps, self.momentum, mode)

    def forward(self, x, train=False):
        out, self._cache = ops.batchnorm_forward(x, self._state("train" if train else "infer"))
        return out

    def backward(self, grad):
        gx, gg, gb = ops.batchnorm_backward(grad, self._saved())
        self.gamma.grad += gg
        self.beta.grad += gb
        self._cache = None
        return gx

    def flops(self, shape):
        return 2 * math.prod(shape[1:]), shape


class PReLU(Layer):
    def __init__(self, store, name, channels, dtype=np.float32, init=0.25):
        self.slope = store.add(name + ".slope", np.full(channels, init, dtype), decay=False)
        self._cache = None

    def forward(self, x, train=False):
        self._cache = x if train else None
        return ops.prelu_forward(x, self.slope.value)

    def backward(self, grad):
        gx, ga = ops.prelu_backward(grad, self._saved(), self.slope.value)
        self.slope.grad += ga
        self._cache = None
        return gx

    def flops(self, shape):
        return 2 * math.prod(shape[1:]), shape


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, train=False):
        self._cache = x if train else None
        return ops.relu_forward(x)

    def backward(self, grad):
        gx = ops.relu_backward(grad, self._saved())
        self._cache = None
        return gx

    def flops(self, shape):
        return 2 * math.prod(shape[1:]), shape


def activation(store, name, channels, kind, dtype=np.float32):
    if kind == "prelu":
        return PReLU(store, name, channels, dtype)
    if kind == "relu":
        return ReLU()
    raise ValueError(f"unknown activation {kind!r}")


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def flops(self, shape):
        total = 0
        for layer in self.layers:
            n, shape = layer.flops(shape)
            total += n
        return total, shape


def conv_bn_act(store, name, spec, act, rng, dtype=np.float32):
    return Sequential(Conv2d(store, name + ".conv", spec, rng, dtype),
                      BatchNorm2d(store, name + ".bn", spec.out_channels, dtype),
                      activation(store, name + ".act", spec.out_channels, act, dtype))


def bn_act(store, name, channels, act, dtype=np.float32):
    return Sequential(BatchNorm2d(store, name + ".bn", channels, dtype),
                      activation(store, name + ".act", channels, act, dtype))


class Affine(Layer):
    def __init__(self, store, name, n_in, n_out, rng, dtype=np.float32):
        w = rand_normal(rng, (n_out, n_in), 0.0, math.sqrt(2.0 / n_in), dtype)
        self.weight = store.add(name + ".weight", w)
        self.bias = store.add(name + ".bias", np.zeros(n_out, dtype))
        self._cache = None

    def forward(self, x, train=False):
        self._cache = x if train else None
        return ops.affine_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        gx, gw, gb = ops.affine_backward(grad, self._saved(), self.weight.value)
        self.weight.grad += gw
        self.bias.grad += gb
        self._cache = None
        return gx

    def flops(self, shape):
        n_out, n_in = self.weight.value.shape
        return 2 * n_in * n_out, (shape[0], n_out)


class GlobalContext(Layer):
    """Channel gate: GAP -> affine -> ReLU -> affine -> sigmoid, then re-weight."""

    def __init__(self, store, name, channels, reduction, rng, dtype=np.float32):
        if channels % reduction:
            raise ShapeError(f"gate reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.fc1 = Affine(store, name + ".fc1", channels, hidden, rng, dtype)
        self.fc2 = Affine(store, name + ".fc2", hidden, channels, rng, dtype)
        self._cache = None

    def gate(self, x, train=False):
        pooled = ops.global_avg_pool_forward(x)
        h = self.fc1.forward(pooled, train)
        hr = ops.relu_forward(h)
        y = ops.sigmoid_forward(self.fc2.forward(hr, train))
        return y, (h, y)

    def forward(self, x, train=False):
        y, saved = self.gate(x, train)
        self._cache = (x, saved) if train else None
        return scale_channels(x, y)

    def backward(self, grad):
        x, (h, y) = self._saved()
        g_gate = (grad * x).sum(axis=(2, 3))
        gx = scale_channels(grad, y)
        g = ops.sigmoid_backward(g_gate, y)
        g = self.fc2.backward(g)
        g = ops.relu_backward(g, h)
        g = self.fc1.backward(g)
        gx += ops.global_avg_pool_backward(g, x.shape)
        self._cache = None
        return gx

    def flops(self, shape):
        c = shape[1]
        n = 2 * c  # pooling output
        n += self.fc1.flops((shape[0], c))[0] + 2 * self.fc1.weight.value.shape[0]
        n += self.fc2.flops((shape[0], self.fc1.weight.value.shape[0]))[0] + 2 * c
        return n, shape
