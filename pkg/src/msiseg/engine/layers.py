"""Parameterized layers and the Module container.

Modules discover parameters by walking their attributes (Tensors with
``requires_grad``, child Modules, and lists of Modules), in definition order,
so names and iteration order are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError
from . import tensor as T
from .kernels import same_padding
from .tensor import Tensor

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "maxpool", "meanpool", "upsample-nearest", "add", "dense",
               "softmax-ce")


@dataclass
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def validate(self) -> "LayerSpec":
        p = self.params
        if self.kind not in LAYER_KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if p.get("kernel", 1) < 1 or p.get("stride", 1) < 1 or p.get("in_channels", 1) < 1 \
                    or p.get("out_channels", 1) < 1:
                raise ArgumentError(f"invalid conv2d hyperparameters {p}")
        elif self.kind == "batchnorm":
            if not p.get("eps", 1e-5) > 0 or not 0 <= p.get("momentum", 0.9) < 1:
                raise ArgumentError(f"invalid batchnorm hyperparameters {p}")
        elif self.kind in ("maxpool", "meanpool"):
            if p.get("window", 2) < 1 or p.get("stride", 1) < 1:
                raise ArgumentError(f"pool window and stride must be >= 1, got {p}")
        elif self.kind == "upsample-nearest":
            if p.get("factor", 2) < 1:
                raise ArgumentError("upsample factor must be >= 1")
        elif self.kind == "dense":
            if p.get("in_features", 1) < 1 or p.get("out_features", 1) < 1:
                raise ArgumentError(f"dense layer needs >= 1 unit, got {p}")
        return self


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix="") -> dict[str, Tensor]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
        for name, child in self._children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix="") -> dict[str, tuple[dict, str]]:
        out = {}
        for key in getattr(self, "_buffer_keys", ()):
            out[prefix + key] = (self.state, key)
        for name, child in self._children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.values.size for p in self.named_parameters().values())

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.values.copy() for k, v in self.named_parameters().items()}
        for k, (store, key) in self.named_buffers().items():
            out[k] = store[key].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict=True, prefix=""):
        params = self.named_parameters()
        buffers = self.named_buffers()
        used = set()
        for k, p in params.items():
            full = prefix + k
            if full in state:
                if state[full].shape != p.values.shape:
                    raise ArgumentError(f"shape mismatch for {full}: {state[full].shape} vs {p.values.shape}")
                p.values = state[full].astype(p.values.dtype).copy()
                used.add(full)
            elif strict:
                raise ArgumentError(f"missing parameter {full}")
        for k, (store, key) in buffers.items():
            full = prefix + k
            if full in state:
                store[key] = state[full].astype(store[key].dtype).copy()
                used.add(full)
            elif strict:
                raise ArgumentError(f"missing buffer {full}")
        return used

    def astype(self, dtype):
        for p in self.named_parameters().values():
            p.values = p.values.astype(dtype)
            p.zero_grad()
        for _, (store, key) in self.named_buffers().items():
            store[key] = store[key].astype(dtype)
        return self


def he_normal(rng: np.random.Generator, shape, fan_in, dtype=np.float32):
    """Zero-mean normal init scaled for ReLU networks."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding="same", rng=None,
                 bias=True, zero_init=False, dtype=np.float32, gain=1.0):
        self.spec = LayerSpec("conv2d", dict(in_channels=in_channels, out_channels=out_channels,
                                             kernel=kernel, stride=stride)).validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_channels, in_channels, kernel, kernel)
        w = np.zeros(shape, dtype) if zero_init else he_normal(rng, shape, in_channels * kernel * kernel, dtype)
        if gain != 1.0:
            w = (w * gain).astype(dtype)
        self.weight = T.parameter(w, "weight")
        self.bias = T.parameter(np.zeros(out_channels, dtype), "bias") if bias else None
        self.stride = stride
        self.padding = same_padding(kernel) if padding == "same" else padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Batch normalization over channel axis 1 for NC or NCHW input."""

    _buffer_keys = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        self.spec = LayerSpec("batchnorm", dict(momentum=momentum, eps=eps)).validate()
        self.gamma = T.parameter(np.ones(channels, dtype), "gamma")
        self.beta = T.parameter(np.zeros(channels, dtype), "beta")
        self.state = {"running_mean": np.zeros(channels, dtype), "running_var": np.ones(channels, dtype)}
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gamma, self.beta, self.state, self.training, self.momentum, self.eps)


class Dense(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        self.spec = LayerSpec("dense", dict(in_features=in_features, out_features=out_features)).validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = T.parameter(he_normal(rng, (in_features, out_features), in_features, dtype), "weight")
        self.bias = T.parameter(np.zeros(out_features, dtype), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


class MaxPool(Module):
    def __init__(self, window, stride=None, padding=0):
        self.spec = LayerSpec("maxpool", dict(window=window, stride=stride or window)).validate()
        self.window, self.stride, self.padding = window, stride or window, padding

    def forward(self, x):
        return T.maxpool(x, self.window, self.stride, self.padding)


class MeanPool(Module):
    def __init__(self, window, stride=None, padding=0):
        self.spec = LayerSpec("meanpool", dict(window=window, stride=stride or window)).validate()
        self.window, self.stride, self.padding = window, stride or window, padding

    def forward(self, x):
        return T.meanpool(x, self.window, self.stride, self.padding)


class PreActConv(Module):
    """BN -> ReLU -> conv, the pre-activation ordering used throughout."""

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, rng=None, zero_init=False,
                 dtype=np.float32, gain=1.0):
        self.bn = BatchNorm(in_channels, dtype=dtype)
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, rng=rng, zero_init=zero_init, dtype=dtype,
                           gain=gain)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(T.relu(self.bn(x)))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x) if isinstance(layer, Module) else layer(x)
        return x


def make_layer(spec: LayerSpec, rng=None) -> Module:
    """Instantiate a parameterized layer from a validated spec."""
    spec.validate()
    p = spec.params
    if spec.kind == "conv2d":
        return Conv2d(p["in_channels"], p["out_channels"], p.get("kernel", 3), p.get("stride", 1),
                      p.get("padding", "same"), rng=rng)
    if spec.kind == "batchnorm":
        return BatchNorm(p["channels"], p.get("momentum", 0.9), p.get("eps", 1e-5))
    if spec.kind == "dense":
        return Dense(p["in_features"], p["out_features"], rng=rng)
    if spec.kind == "maxpool":
        return MaxPool(p.get("window", 2), p.get("stride"), p.get("padding", 0))
    if spec.kind == "meanpool":
        return MeanPool(p.get("window", 2), p.get("stride"), p.get("padding", 0))
    raise ArgumentError(f"layer kind {spec.kind!r} has no parameters; use the tensor op directly")
