"""Parameterized layers: convolution, normalization, squeeze-excitation,
multi-head attention, dropout and a small ``Module`` container system."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


class ConfigError(ValueError):
    """A layer or model was configured with incompatible hyperparameters."""


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or T.get_default_dtype())


# -- initializers -----------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to ±2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def kaiming_fan_out(rng: np.random.Generator, shape, groups: int = 1) -> np.ndarray:
    out_ch, _, k, _ = shape
    fan_out = out_ch * k * k // groups
    return rng.normal(0.0, math.sqrt(2.0 / fan_out), size=shape)


# -- module system ----------------------------------------------------------------

class Module:
    """Base container.  Parameters, sub-modules and buffers are discovered
    from instance attributes (lists of modules included)."""

    training = True

    def __call__(self, *args, **kwargs):
        if T.recording():
            with T.scope(self.__dict__.get("_scope_name") or type(self).__name__):
                return self.forward(*args, **kwargs)
        return self.forward(*args, **kwargs)

    def name_scopes(self) -> "Module":
        """Label recorded ops with each sub-module's dotted path instead of its class name."""
        for name, mod in self.named_modules():
            mod._scope_name = name or type(mod).__name__
        return self

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{name}" if prefix else name), value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield (f"{prefix}.{name}" if prefix else name), getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        buffers = {name: None for name, _ in self.named_buffers()}
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        mods = dict(self.named_modules())
        for name in buffers:
            owner, _, attr = name.rpartition(".")
            mod = mods[owner]
            setattr(mod, attr, np.array(state[name], dtype=getattr(mod, attr).dtype))


# -- layers -----------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got input {x.shape}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = False):
        if in_channels % groups or out_channels % groups:
            raise ConfigError(f"groups={groups} must divide in={in_channels} and out={out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.weight = Parameter(kaiming_fan_out(rng, shape, groups))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def output_size(self, size: int) -> int:
        return T.conv_output_size(size, self.kernel_size, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv2d expects (B, {self.in_channels}, H, W), got {x.shape}")
        y = T.conv2d(x, self.weight, self.stride, self.padding, self.groups)
        if self.bias is not None:
            y = y + T.reshape(self.bias, (1, -1, 1, 1))
        return y


class BatchNorm2d(Module):
    """Batch normalization over (B, H, W) per channel with running statistics.

    Running variance is tracked with the unbiased estimator; the batch itself
    is normalized with the biased one.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=T.get_default_dtype())
        self.running_var = np.ones(channels, dtype=T.get_default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] == 0:
            raise ContractError("batch_norm on an empty batch")
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm2d expects (B, {self.channels}, H, W), got {x.shape}")
        scale = T.reshape(self.weight, (1, -1, 1, 1))
        shift = T.reshape(self.bias, (1, -1, 1, 1))
        if self.training:
            mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
            xc = x - mu
            var = T.mean(xc * xc, axis=(0, 2, 3), keepdims=True)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            return xc / T.sqrt(var + self.eps) * scale + shift
        mu = self.running_mean.reshape(1, -1, 1, 1).astype(x.dtype)
        inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(1, -1, 1, 1).astype(x.dtype)
        return (x - mu) * inv * scale + shift


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.dim = dim
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.eps) * self.weight + self.bias


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (no affine)."""
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps)


class GELU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(x)


class Dropout(Module):
    """Inverted dropout: scales kept units by 1/(1-rate) while training."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        return x * keep


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return T.mean(x, axis=(2, 3))


def se_width(block_in: int, ratio: float = 0.25, minimum: int = 8) -> int:
    return max(minimum, int(round(ratio * block_in)))


class SqueezeExcitation(Module):
    """Channel gate: x · sigmoid(W2 · gelu(W1 · GAP(x)))."""

    def __init__(self, channels: int, squeeze: int, rng: np.random.Generator):
        self.channels = channels
        self.squeeze = squeeze
        self.reduce = Linear(channels, squeeze, rng)
        self.expand = Linear(squeeze, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        s = global_avg_pool(x)
        return T.sigmoid(self.expand(T.gelu(self.reduce(s))))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"SqueezeExcitation expects {self.channels} channels, got {x.shape}")
        g = self.gate(x)
        return x * T.reshape(g, (x.shape[0], self.channels, 1, 1))


class MultiHeadAttention(Module):
    """softmax(Q Kᵀ / √d_k) V per head, heads concatenated then projected.

    ``d_k = dim // heads``; the inner width ``heads * d_k`` may be smaller
    than ``dim`` and the output projection maps it back to ``dim``.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim // heads < 1:
            raise ConfigError(f"attention with dim={dim}, heads={heads} leaves no per-head width")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.inner = self.heads * self.head_dim
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.q = Linear(dim, self.inner, rng)
        self.k = Linear(dim, self.inner, rng)
        self.v = Linear(dim, self.inner, rng)
        self.out = Linear(self.inner, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, queries: Tensor, keys_values: Tensor | None = None) -> Tensor:
        kv = queries if keys_values is None else keys_values
        if queries.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise ShapeError(f"attention dim {self.dim} vs queries {queries.shape}, keys/values {kv.shape}")
        b, nq, _ = queries.shape
        q = self._split(self.q(queries))
        k = self._split(self.k(kv))
        v = self._split(self.v(kv))
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * self.scale
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = T.matmul(weights, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, nq, self.inner))
        return self.out(ctx)
