"""Dense float64 tensors with tape-free reverse-mode differentiation.

Each op returns a ``Tensor`` that remembers its parents and a closure that
pushes the output gradient back to them. Four-dimensional tensors are
logically NCHW; conv and batch-norm outputs are channels-last in memory
(an NCHW-shaped view of an NHWC buffer), which keeps 1x1 convolutions a
single matmul.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "is_grad_enabled",
    "count_multiplies",
    "track_relu_margin",
    "conv2d",
    "activation",
    "relu",
    "swish",
    "sigmoid",
    "batch_norm",
    "global_avg_pool",
    "softmax_cross_entropy",
    "log_softmax",
]

_GRAD_ENABLED = True
_MAC_COUNTERS: list[list[int]] = []
_RELU_MARGINS: list[list[float]] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def count_multiplies():
    """Count conv multiplies executed inside the block.

    Yields a one-element list holding the running total.
    """
    box = [0]
    _MAC_COUNTERS.append(box)
    try:
        yield box
    finally:
        _MAC_COUNTERS.remove(box)


@contextlib.contextmanager
def track_relu_margin():
    """Record the smallest |pre-activation| seen by any relu inside the block."""
    box = [np.inf]
    _RELU_MARGINS.append(box)
    try:
        yield box
    finally:
        _RELU_MARGINS.remove(box)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers ---------------------------------------------

    @classmethod
    def _make(cls, data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g if self.grad is None else self.grad + g

    # -- properties ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not isinstance(node, Parameter) and node._parents:
                    node.grad = None

    # -- elementwise arithmetic ---------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            self._accum(g)
            other._accum(g)

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            self._accum(g)
            other._accum(-g)

        return Tensor._make(self.data - other.data, (self, other), bw)

    def __rsub__(self, other):
        return Tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: self._accum(-g))

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def bw(g):
            if self.requires_grad:
                self._accum(g * b)
            if other.requires_grad:
                other._accum(g * a)

        return Tensor._make(a * b, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float):
        if isinstance(scalar, Tensor):
            raise TypeError("division is only defined by a constant")
        return self * (1.0 / scalar)

    def square(self) -> "Tensor":
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: self._accum(2.0 * g * a))

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: self._accum(g * np.sign(a)))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, shape))

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.data.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: self._accum(g.reshape(old)))


class Parameter(Tensor):
    """Trainable leaf tensor with Adam moment accumulators."""

    __slots__ = ("m", "v", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    def reset_state(self) -> None:
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def conv2d(x, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D convolution of an NCHW tensor with weight (Cout, Cin/groups, k, k)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got rank {x.ndim}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be rank 4, got rank {weight.ndim}")
    N, cin, H, W = x.shape
    cout, cig, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"kernel must be square, got {k}x{k2}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if groups < 1 or cin % groups:
        raise ValueError(f"input channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise ValueError(f"output channels {cout} not divisible by groups {groups}")
    if cig * groups != cin:
        raise ValueError(f"input channels: tensor has {cin}, weight expects {cig * groups}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias length {bias.shape} does not match output channels {cout}")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"spatial size {H}x{W} too small for kernel {k} with padding {padding}")

    for box in _MAC_COUNTERS:
        box[0] += N * cout * Ho * Wo * cig * k * k

    xh = x.data.transpose(0, 2, 3, 1)
    w = weight.data
    out = kernels.conv2d_forward(xh, w, stride, padding, groups)
    if bias is not None:
        out += bias.data

    def bw(g):
        gh = g.transpose(0, 2, 3, 1)
        if bias is not None and bias.requires_grad:
            bias._accum(gh.sum(axis=(0, 1, 2)))
        if x.requires_grad or weight.requires_grad:
            gx, gw = kernels.conv2d_backward(xh, w, gh, stride, padding, groups)
            weight._accum(gw)
            x._accum(gx.transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out.transpose(0, 3, 1, 2), parents, bw)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def activation(x, kind: str) -> Tensor:
    """Elementwise ``relu``, ``swish`` (x * sigmoid(x)) or ``sigmoid``."""
    x = _as_tensor(x)
    a = x.data
    if kind == "relu":
        if _RELU_MARGINS:
            m = float(np.abs(a).min()) if a.size else np.inf
            for box in _RELU_MARGINS:
                box[0] = min(box[0], m)
        mask = a > 0
        return Tensor._make(a * mask, (x,), lambda g: x._accum(g * mask))
    if kind == "sigmoid":
        s = _sigmoid(a)
        return Tensor._make(s, (x,), lambda g: x._accum(g * (s - s * s)))
    if kind == "swish":
        s = _sigmoid(a)
        out = a * s

        def bw(g):
            # d/dx x*s = s + x*s*(1-s) = s + out*(1-s)
            x._accum(g * (s + out * (1.0 - s)))

        return Tensor._make(out, (x,), bw)
    raise ValueError(f"unknown activation {kind!r}")


def relu(x) -> Tensor:
    return activation(x, "relu")


def swish(x) -> Tensor:
    return activation(x, "swish")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


# --------------------------------------------------------------------------
# normalization and pooling
# --------------------------------------------------------------------------


def batch_norm(
    x,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place with
    ``running = (1 - momentum) * running + momentum * batch`` (unbiased
    batch variance). Zero-variance channels normalize to zero via ``eps``.
    """
    x = _as_tensor(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batch_norm: channels {C} do not match parameter length {gamma.shape[0]}")
    xh = x.data.transpose(0, 2, 3, 1)
    g_, b_ = gamma.data, beta.data
    if training:
        M = xh.size // C
        out2, xhat, mean, var, invstd = kernels.bn_train_forward(xh.reshape(M, C), g_, b_, eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * (var * M / (M - 1) if M > 1 else var)
        out = out2.reshape(xh.shape)

        def bw(gy):
            gy = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(M, C)
            gx, dgamma, dbeta = kernels.bn_train_backward(gy, xhat, g_, invstd)
            gamma._accum(dgamma)
            beta._accum(dbeta)
            x._accum(gx.reshape(xh.shape).transpose(0, 3, 1, 2))

    else:
        invstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (xh - running_mean) * invstd
        out = xhat * g_ + b_

        def bw(gy):
            gy = gy.transpose(0, 2, 3, 1)
            gamma._accum(np.einsum("nhwc,nhwc->c", gy, xhat))
            beta._accum(gy.sum(axis=(0, 1, 2)))
            if x.requires_grad:
                x._accum((gy * (g_ * invstd)).transpose(0, 3, 1, 2))

    return Tensor._make(out.transpose(0, 3, 1, 2), (x, gamma, beta), bw)


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean, (N, C, H, W) -> (N, C, 1, 1)."""
    x = _as_tensor(x)
    N, C, H, W = x.shape
    shape = x.shape
    scale = 1.0 / (H * W)

    def bw(g):
        x._accum(np.broadcast_to(g * scale, shape))

    return Tensor._make(x.data.mean(axis=(2, 3), keepdims=True), (x,), bw)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def log_softmax(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Batch-mean cross entropy of (N, K) logits.

    ``targets`` is either an integer class vector of length N or an (N, K)
    array of probability rows.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (N, K), got shape {logits.shape}")
    N, K = logits.shape
    if K < 2:
        raise ValueError("need at least two classes")
    targets = np.asarray(targets)
    if targets.ndim == 1:
        if targets.shape[0] != N:
            raise ValueError(f"{targets.shape[0]} targets for batch of {N}")
        p = np.zeros((N, K))
        p[np.arange(N), targets.astype(np.int64)] = 1.0
    else:
        if targets.shape != (N, K):
            raise ValueError(f"target rows {targets.shape} do not match logits {logits.shape}")
        p = targets.astype(np.float64)
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6) or np.any(p < 0):
            raise ValueError("probability targets must be non-negative rows summing to 1")
    ls = log_softmax(logits.data)
    loss = -(p * ls).sum() / N

    def bw(g):
        logits._accum(g * (np.exp(ls) - p) / N)

    return Tensor._make(np.asarray(loss), (logits,), bw)
