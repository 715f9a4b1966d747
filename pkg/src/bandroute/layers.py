"""Neural building blocks on top of :mod:`bandroute.tensor`.

All layers act on ``B x C x T`` tensors and keep T unchanged.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, ShapeError
from .tensor import Tensor, apply_primitive

__all__ = [
    "Module",
    "Conv1d",
    "LayerNorm",
    "GRU",
    "Inception1D",
    "DepthwisePointwise",
    "MultiHeadSelfAttention",
    "FeedForward",
    "conv1d",
    "gelu",
    "sigmoid",
    "tanh",
    "softmax",
    "layer_norm",
    "concat",
    "film_modulate",
    "mhsa_over_bands",
]


# -- functional wrappers ----------------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, padding="same", stride=1, groups=1):
    inputs = [x, w] if b is None else [x, w, b]
    return apply_primitive("conv1d", inputs, {"padding": padding, "stride": stride, "groups": groups})


def gelu(x: Tensor) -> Tensor:
    return apply_primitive("gelu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", [x])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], {"axis": axis})


def layer_norm(x: Tensor, axis: int = 1, eps: float = 1e-7) -> Tensor:
    return apply_primitive("layer_norm", [x], {"axis": axis, "eps": eps})


def concat(xs: List[Tensor], axis: int) -> Tensor:
    return apply_primitive("concat", list(xs), {"axis": axis})


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return apply_primitive("slice", [x], {"axis": axis, "start": start, "stop": stop})


def film_modulate(u: Tensor, tau: Tensor, psi: Tensor) -> Tensor:
    """Feature-wise modulation ``u * (1 + tanh(tau)) + psi``."""
    if u.shape != tau.shape or u.shape != psi.shape:
        try:
            np.broadcast_shapes(u.shape, tau.shape, psi.shape)
        except ValueError:
            raise ShapeError(f"FiLM shapes differ: u {u.shape}, tau {tau.shape}, psi {psi.shape}") from None
    return u * (tanh(tau) + 1.0) + psi


# -- parameter containers ---------------------------------------------------


class Module:
    """Minimal parameter registry: attributes that are Tensors or Modules are
    tracked in assignment order, giving deterministic dotted names."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        seen = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            yield name, p

    def _walk(self, prefix):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m._walk(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Conv1d(Module):
    def __init__(self, cin, cout, kernel, rng, groups=1, bias=True, dtype=np.float64):
        super().__init__()
        if cin % groups or cout % groups:
            raise ConfigError(f"channels {cin}->{cout} not divisible by groups={groups}")
        self.groups = groups
        fan_in = (cin // groups) * kernel
        self.weight = _uniform(rng, (cout, cin // groups, kernel), fan_in, dtype)
        self.bias = _zeros((cout,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, groups=self.groups)


class LayerNorm(Module):
    """Normalize over the channel axis (1) at each time step, then scale/shift."""

    def __init__(self, channels, dtype=np.float64, eps=1e-7):
        super().__init__()
        self.eps = eps
        self.gamma = _ones((channels, 1), dtype)
        self.beta = _zeros((channels, 1), dtype)

    def forward(self, x: Tensor, axis: int = 1) -> Tensor:
        y = layer_norm(x, axis=axis, eps=self.eps)
        if axis in (-1, x.ndim - 1):
            return y * self.gamma.reshape(-1) + self.beta.reshape(-1)
        return y * self.gamma + self.beta


class GRU(Module):
    def __init__(self, cin, hidden, rng, dtype=np.float64):
        super().__init__()
        self.hidden = hidden
        self.w_ih = _uniform(rng, (3 * hidden, cin), cin, dtype)
        self.w_hh = _uniform(rng, (3 * hidden, hidden), hidden, dtype)
        self.b_ih = _zeros((3 * hidden,), dtype)
        self.b_hh = _zeros((3 * hidden,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return apply_primitive("gru", [x, self.w_ih, self.w_hh, self.b_ih, self.b_hh])


class Inception1D(Module):
    """Four parallel branches (k=1, k=3, k=5, avg-pool3 + k=1), each Cout/4
    channels, concatenated and passed through GELU. Adds the input back when
    Cin == Cout."""

    def __init__(self, cin, cout, rng, dtype=np.float64):
        super().__init__()
        if cout % 4:
            raise ConfigError(f"Inception1D output channels must be divisible by 4, got {cout}")
        q = cout // 4
        self.cin, self.cout = cin, cout
        self.b1 = Conv1d(cin, q, 1, rng, dtype=dtype)
        self.b3 = Conv1d(cin, q, 3, rng, dtype=dtype)
        self.b5 = Conv1d(cin, q, 5, rng, dtype=dtype)
        self.bp = Conv1d(cin, q, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        pooled = apply_primitive("avg_pool1d", [x], {"kernel": 3})
        y = gelu(concat([self.b1(x), self.b3(x), self.b5(x), self.bp(pooled)], axis=1))
        return y + x if self.cin == self.cout else y


class DepthwisePointwise(Module):
    def __init__(self, channels, rng, kernel=5, dtype=np.float64):
        super().__init__()
        self.depthwise = Conv1d(channels, channels, kernel, rng, groups=channels, dtype=dtype)
        self.pointwise = Conv1d(channels, channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, cin, cout, rng, dtype=np.float64):
        super().__init__()
        self.weight = _uniform(rng, (cin, cout), cin, dtype)
        self.bias = _zeros((cout,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MultiHeadSelfAttention(Module):
    def __init__(self, dim, heads, rng, dtype=np.float64):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"attention width {dim} not divisible by heads={heads}")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def forward(self, tokens: Tensor, return_attention: bool = False):
        """tokens: N x K x C -> N x K x C."""
        N, K, C = tokens.shape
        h, dh = self.heads, C // self.heads

        def split(t):
            return t.reshape(N, K, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=-1)
        heads = (attn @ v).transpose(0, 2, 1, 3).reshape(N, K, C)
        out = self.out(heads)
        return (out, attn) if return_attention else out


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, dtype=np.float64):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def mhsa_over_bands(z: Tensor, attn: MultiHeadSelfAttention, return_attention: bool = False):
    """Self-attention across the K band tokens of each time step.

    ``z`` is K x C (one time step) or N x K x C (a batch of time steps).
    """
    single = z.ndim == 2
    if single:
        z = z.reshape(1, *z.shape)
    if z.shape[-1] != attn.dim:
        raise ShapeError(f"band tokens have width {z.shape[-1]}, attention expects {attn.dim}")
    out = attn(z, return_attention=return_attention)
    if return_attention:
        out, weights = out
        return (out.reshape(*out.shape[1:]) if single else out), weights
    return out.reshape(*out.shape[1:]) if single else out
