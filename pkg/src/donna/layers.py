"""Module containers and the layers used by the block zoo."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    activation,
    batch_norm,
    conv2d,
    global_avg_pool,
)

__all__ = [
    "Module",
    "Sequential",
    "Conv2d",
    "BatchNorm2d",
    "Activation",
    "SqueezeExcite",
    "GlobalAvgPool",
    "Flatten",
    "Identity",
]


class Module:
    """Base class: attribute order defines parameter order."""

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for b in self._buffer_names:
            yield prefix + b, getattr(self, b)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self, buffers: bool = True) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        if buffers:
            state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, p in params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()
            p.reset_state()
        for name, b in buffers.items():
            if name in state:
                b[...] = state[name]
            elif strict:
                raise KeyError(f"missing buffer {name!r}")
        if strict:
            extra = set(state) - set(params) - set(buffers)
            if extra:
                raise KeyError(f"unexpected entries {sorted(extra)}")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def macs(self, shape):
        total = 0
        for layer in self.layers:
            m, shape = layer.macs(shape)
            total += m
        return total, shape


class Identity(Module):
    def forward(self, x):
        return x

    def macs(self, shape):
        return 0, shape


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Convolution with 'same' padding (k // 2)."""

    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int = 1,
        stride: int = 1,
        groups: int = 1,
        bias: bool = False,
        rng: np.random.Generator | None = None,
    ):
        if cin % groups or cout % groups:
            raise ValueError(f"channels {cin}->{cout} not divisible by groups {groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.kernel, self.stride, self.groups = cin, cout, kernel, stride, groups
        fan_in = (cin // groups) * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.kernel // 2, self.groups)

    def macs(self, shape):
        n, c, h, w = shape
        if c != self.cin:
            raise ValueError(f"Conv2d expects {self.cin} channels, got {c}")
        p = self.kernel // 2
        ho = (h + 2 * p - self.kernel) // self.stride + 1
        wo = (w + 2 * p - self.kernel) // self.stride + 1
        per_out = (self.cin // self.groups) * self.kernel * self.kernel
        return n * self.cout * ho * wo * per_out, (n, self.cout, ho, wo)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )

    def macs(self, shape):
        return 0, shape


class Activation(Module):
    def __init__(self, kind: str):
        if kind not in ("relu", "swish", "sigmoid"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        return activation(x, self.kind)

    def macs(self, shape):
        return 0, shape


class GlobalAvgPool(Module):
    def forward(self, x):
        return global_avg_pool(x)

    def macs(self, shape):
        n, c, _, _ = shape
        return 0, (n, c, 1, 1)


class Flatten(Module):
    """(N, C, 1, 1) -> (N, C)."""

    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)

    def macs(self, shape):
        return 0, (shape[0], int(np.prod(shape[1:])))


class SqueezeExcite(Module):
    """Channel gating: pool -> 1x1 reduce -> act -> 1x1 expand -> sigmoid -> scale."""

    def __init__(self, channels: int, hidden: int, act: str = "swish", rng: np.random.Generator | None = None):
        self.reduce = Conv2d(channels, hidden, 1, bias=True, rng=rng)
        self.act = Activation(act)
        self.expand = Conv2d(hidden, channels, 1, bias=True, rng=rng)

    def forward(self, x):
        s = global_avg_pool(x)
        s = self.act(self.reduce(s))
        s = activation(self.expand(s), "sigmoid")
        return x * s

    def macs(self, shape):
        n, c, _, _ = shape
        m1, s = self.reduce.macs((n, c, 1, 1))
        m2, _ = self.expand.macs(s)
        return m1 + m2, shape
