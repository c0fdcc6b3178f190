"""Parameterized layers and sequential composition.

All layers consume and produce batched tensors: a leading batch axis is
always present and never part of a layer's declared shapes. Weights are
He-normal (std sqrt(2/fan_in)), biases start at zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError


def he_normal(rng, shape, fan_in, dtype=np.float32):
    std = math.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


class Layer:
    """Base layer: stateless unless it declares parameters."""

    def parameters(self):
        return []

    def named_parameters(self, prefix):
        return [(f"{prefix}.{name}", p) for name, p in self._param_items()]

    def _param_items(self):
        return []

    def init_params(self, rng, dtype=np.float32):
        pass

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Dense(Layer):
    def __init__(self, in_features, out_features, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = zeros_param((in_features, out_features), dtype)
        self.bias = zeros_param((out_features,), dtype)

    def _param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def parameters(self):
        return [self.weight, self.bias]

    def init_params(self, rng, dtype=np.float32):
        self.weight = he_normal(rng, (self.in_features, self.out_features), self.in_features, dtype)
        self.bias = zeros_param((self.out_features,), dtype)

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise DimensionError(f"dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)


class Conv(Layer):
    def __init__(self, in_channels, out_channels, kernel=4, stride=2, pad=1, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.weight = zeros_param((out_channels, in_channels, kernel, kernel), dtype)
        self.bias = zeros_param((out_channels, 1, 1), dtype)

    def _param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def parameters(self):
        return [self.weight, self.bias]

    def init_params(self, rng, dtype=np.float32):
        fan_in = self.in_channels * self.kernel * self.kernel
        self.weight = he_normal(
            rng, (self.out_channels, self.in_channels, self.kernel, self.kernel), fan_in, dtype
        )
        self.bias = zeros_param((self.out_channels, 1, 1), dtype)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise DimensionError(f"conv expects {self.in_channels} channels, got {c}")
        oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
        ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
        return (self.out_channels, oh, ow)

    def forward(self, x):
        return ad.add(ad.conv2d(x, self.weight, self.stride, self.pad), self.bias)


class Deconv(Layer):
    def __init__(self, in_channels, out_channels, kernel=4, stride=2, pad=1, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.weight = zeros_param((in_channels, out_channels, kernel, kernel), dtype)
        self.bias = zeros_param((out_channels, 1, 1), dtype)

    def _param_items(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def parameters(self):
        return [self.weight, self.bias]

    def init_params(self, rng, dtype=np.float32):
        fan_in = self.in_channels * self.kernel * self.kernel
        self.weight = he_normal(
            rng, (self.in_channels, self.out_channels, self.kernel, self.kernel), fan_in, dtype
        )
        self.bias = zeros_param((self.out_channels, 1, 1), dtype)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise DimensionError(f"deconv expects {self.in_channels} channels, got {c}")
        oh = (h - 1) * self.stride - 2 * self.pad + self.kernel
        ow = (w - 1) * self.stride - 2 * self.pad + self.kernel
        return (self.out_channels, oh, ow)

    def forward(self, x):
        return ad.add(ad.deconv2d(x, self.weight, self.stride, self.pad), self.bias)


class Reshape(Layer):
    """Per-sample reshape; the batch axis is untouched."""

    def __init__(self, target_shape):
        self.target_shape = tuple(int(s) for s in target_shape)

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.target_shape)):
            raise DimensionError(
                f"reshape {in_shape} -> {self.target_shape} changes element count"
            )
        return self.target_shape

    def forward(self, x):
        return ad.reshape(x, (x.shape[0],) + self.target_shape)


ACTIVATIONS = ("relu", "leaky-relu", "tanh", "sigmoid", "tanh01")


class Activation(Layer):
    """Pointwise nonlinearity; tanh01 maps tanh output onto [0, 1]."""

    def __init__(self, kind, alpha=0.2):
        if kind not in ACTIVATIONS:
            raise ContractError(f"unknown activation {kind!r}")
        self.kind = kind
        self.alpha = alpha

    def forward(self, x):
        if self.kind == "leaky-relu":
            return ad.leaky_relu(x, self.alpha)
        if self.kind == "tanh01":
            return (ad.ttanh(x) + 1.0) * 0.5
        return ad.elementwise(self.kind, x)


class BatchAffine(Layer):
    """Learned per-feature scale and shift; disabled in the reference stacks."""

    def __init__(self, num_features, spatial=False, dtype=np.float32):
        shape = (num_features, 1, 1) if spatial else (num_features,)
        self.num_features = num_features
        self.spatial = spatial
        self.scale = Tensor(np.ones(shape, dtype=dtype), requires_grad=True, dtype=dtype)
        self.shift = zeros_param(shape, dtype)

    def _param_items(self):
        return [("scale", self.scale), ("shift", self.shift)]

    def parameters(self):
        return [self.scale, self.shift]

    def init_params(self, rng, dtype=np.float32):
        shape = self.scale.shape
        self.scale = Tensor(np.ones(shape, dtype=dtype), requires_grad=True, dtype=dtype)
        self.shift = zeros_param(shape, dtype)

    def forward(self, x):
        return ad.add(ad.mul(x, self.scale), self.shift)


class Sequential:
    """Ordered layer chain with a declared per-sample input shape."""

    def __init__(self, layers, input_shape=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.output_shape = None
        if self.input_shape is not None:
            shape = self.input_shape
            for layer in self.layers:
                shape = layer.out_shape(shape)
            self.output_shape = shape

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            name = f"{prefix}layer{i:02d}"
            out.extend(layer.named_parameters(name))
        return out

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def init_params(self, seed, dtype=np.float32):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng, dtype)
        return self

    def _check_input(self, x):
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"expected input {self.input_shape} (plus batch dim), got {tuple(x.shape[1:])}"
            )

    def forward(self, x):
        self._check_input(x)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward_with_capture(self, x, capture_index):
        """Forward pass that also returns the output of layers[capture_index]."""
        self._check_input(x)
        captured = None
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i == capture_index:
                captured = x
        if captured is None:
            raise ContractError(f"capture index {capture_index} out of range")
        return x, captured

    def __call__(self, x):
        return self.forward(x)


def set_requires_grad(net, flag):
    for p in net.parameters():
        p.requires_grad = bool(flag)
        if flag and p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(params):
    for p in params:
        p.zero_grad()


def init_params(layer, seed, dtype=np.float32):
    """Seed-deterministic init of a single layer (He weights, zero biases)."""
    layer.init_params(np.random.default_rng(seed), dtype)
    return layer
