"""Parameterized layer wrappers with deterministic Gaussian initialization."""

from __future__ import annotations

import numpy as np

from .tensor import BNState, ShapeError, Tensor, activation, batch_norm, conv2d, conv_transpose2d

WEIGHT_STD = 0.02  # conv/deconv kernel init, cGAN lineage convention


class Conv:
    def __init__(self, name, cin, cout, kernel, stride=1, pad=0, dilation=1,
                 rng=None, dtype=np.float32):
        self.name = name
        self.stride = stride
        self.pad = pad
        self.dilation = dilation
        w = rng.normal((cout, cin, kernel, kernel), std=WEIGHT_STD, dtype=dtype)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad,
                      dilation=self.dilation)

    def params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]

    def arrays(self):
        return [(n, t.data) for n, t in self.params()]

    def load(self, get):
        for n, t in self.params():
            t.data = _shaped(get(n), t.data, n)


class Deconv:
    """Transposed convolution; weight layout [Cin, Cout, k, k]."""

    def __init__(self, name, cin, cout, kernel, stride=1, pad=0, rng=None,
                 dtype=np.float32):
        self.name = name
        self.stride = stride
        self.pad = pad
        w = rng.normal((cin, cout, kernel, kernel), std=WEIGHT_STD, dtype=dtype)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x):
        return conv_transpose2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]

    def arrays(self):
        return [(n, t.data) for n, t in self.params()]

    def load(self, get):
        for n, t in self.params():
            t.data = _shaped(get(n), t.data, n)


class BatchNorm:
    def __init__(self, name, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True,
                            name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True,
                           name=f"{name}.beta")
        self.state = BNState(channels, dtype=dtype, momentum=momentum, eps=eps)

    def __call__(self, x, train):
        return batch_norm(x, self.gamma, self.beta, self.state, train)

    def params(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]

    def arrays(self):
        return ([(n, t.data) for n, t in self.params()]
                + [(f"{self.name}.running_mean", self.state.mean),
                   (f"{self.name}.running_var", self.state.var)])

    def load(self, get):
        for n, t in self.params():
            t.data = _shaped(get(n), t.data, n)
        self.state.mean = _shaped(get(f"{self.name}.running_mean"), self.state.mean,
                                  f"{self.name}.running_mean")
        self.state.var = _shaped(get(f"{self.name}.running_var"), self.state.var,
                                 f"{self.name}.running_var")


class Linear:
    def __init__(self, name, cin, cout, rng=None, dtype=np.float32):
        self.name = name
        w = rng.normal((cin, cout), std=WEIGHT_STD, dtype=dtype)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x):
        return x @ self.w + self.b

    def params(self):
        return [(self.w.name, self.w), (self.b.name, self.b)]

    def arrays(self):
        return [(n, t.data) for n, t in self.params()]

    def load(self, get):
        for n, t in self.params():
            t.data = _shaped(get(n), t.data, n)


def leaky(x):
    return activation(x, "leaky_relu_0.2")


def relu(x):
    return activation(x, "relu")


def _shaped(arr, like, name):
    arr = np.asarray(arr)
    if arr.shape != like.shape:
        raise ShapeError(f"checkpoint tensor {name!r} has shape {arr.shape}, "
                         f"expected {like.shape}")
    return np.ascontiguousarray(arr, dtype=like.dtype)
