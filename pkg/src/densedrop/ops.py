"""Layer primitives with forward and backward passes.

All activations are NCHW. Convolution lowers to im2col columns of shape
(N, C*kh*kw, H*W) and one batched matmul, which leaves the output in NCHW
order; 1x1 stride-1 convolutions skip the column copy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from densedrop.tensor import Function, ShapeError, Tensor


class Add(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Total(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    def backward(self, grad):
        return (np.full(self.shape, grad, dtype=grad.dtype),)


class ReLU(Function):
    def forward(self, x):
        # Subgradient at exactly 0 is 0.
        self.positive = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        return (grad * self.positive,)


class Scale(Function):
    """Multiply by a constant array that broadcasts against the input."""

    def forward(self, x, factor: np.ndarray):
        if np.broadcast_shapes(x.shape, factor.shape) != x.shape:
            raise ShapeError(f"mask of shape {factor.shape} does not broadcast to {x.shape}")
        self.factor = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Concat(Function):
    def forward(self, *xs):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != 4 or (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
                raise ShapeError(f"concat: {x.shape} does not match {ref} outside the channel axis")
        self.bounds = np.cumsum([0] + [x.shape[1] for x in xs])
        if len(xs) == 1:
            return xs[0].copy()
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        b = self.bounds
        return tuple(grad[:, b[i] : b[i + 1]] for i in range(len(b) - 1))


class Narrow(Function):
    """Channel slice ``x[:, start:stop]``."""

    def forward(self, x, start: int, stop: int):
        if not 0 <= start < stop <= x.shape[1]:
            raise ShapeError(f"narrow [{start}, {stop}) outside {x.shape[1]} channels")
        self.shape, self.start, self.stop = x.shape, start, stop
        return x[:, start:stop].copy()

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[:, self.start : self.stop] = grad
        return (out,)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C * kh * kw, ho * wo), one strided copy per kernel tap."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


class Conv2d(Function):
    def forward(self, x, w, stride: int = 1, padding: int = 0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
        self.x, self.w = x, w
        self.stride, self.padding, self.out_hw = stride, padding, (ho, wo)
        self.pointwise = kh == kw == 1 and stride == 1 and padding == 0
        wf = w.reshape(o, c * kh * kw)
        if self.pointwise:
            return np.matmul(wf, x.reshape(n, c, h * wd)).reshape(n, o, h, wd)
        cols = _im2col(self._padded(), kh, kw, stride, ho, wo)
        return np.matmul(wf, cols).reshape(n, o, ho, wo)

    def _padded(self):
        p = self.padding
        return np.pad(self.x, ((0, 0), (0, 0), (p, p), (p, p))) if p else self.x

    def backward(self, grad):
        x, w, s, p = self.x, self.w, self.stride, self.padding
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        ho, wo = self.out_hw
        wf = w.reshape(o, c * kh * kw)
        g3 = grad.reshape(n, o, ho * wo)
        if self.pointwise:
            x3 = x.reshape(n, c, h * wd)
            dw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            dx = np.matmul(wf.T, g3).reshape(x.shape)
            return dx, dw
        # Columns are recomputed rather than cached to bound memory on wide layers.
        cols = _im2col(self._padded(), kh, kw, s, ho, wo)
        dw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        dcols = np.matmul(wf.T, g3).reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        return np.ascontiguousarray(dx), dw


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


class BatchNorm(Function):
    def forward(self, x, gamma, beta, state: BatchNormState = None, train: bool = True):
        if x.ndim != 4 or x.shape[1] != gamma.shape[0]:
            raise ShapeError(f"batchnorm: input {x.shape} has {x.shape[1]} channels, state has {gamma.shape[0]}")
        bshape = (1, -1, 1, 1)
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise ShapeError("batchnorm: train mode needs at least two values per channel")
            mean = x.mean(axis=(0, 2, 3))
            centered = x - mean.reshape(bshape)
            var = (centered * centered).mean(axis=(0, 2, 3))
            mom = state.momentum
            state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
            state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
        else:
            mean, var = state.running_mean, state.running_var
            centered = x - mean.reshape(bshape)
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
        xhat = centered * inv_std.reshape(bshape)
        self.train, self.xhat, self.inv_std, self.gamma = train, xhat, inv_std, gamma
        return xhat * gamma.reshape(bshape) + beta.reshape(bshape)

    def backward(self, grad):
        bshape = (1, -1, 1, 1)
        xhat, inv_std = self.xhat, self.inv_std
        dbeta = grad.sum(axis=(0, 2, 3))
        dgamma = (grad * xhat).sum(axis=(0, 2, 3))
        scale = (self.gamma * inv_std).reshape(bshape)
        if not self.train:
            return grad * scale, dgamma, dbeta
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        dx = scale * (grad - (dbeta / m).reshape(bshape) - xhat * (dgamma / m).reshape(bshape))
        return dx, dgamma, dbeta


class AvgPool2x2(Function):
    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"avgpool2x2 needs even spatial extents, got {x.shape}")
        self.shape = x.shape
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, grad):
        g = grad * np.asarray(0.25, dtype=grad.dtype)
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3),)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.shape
        g = grad / np.asarray(h * w, dtype=grad.dtype)
        return (np.broadcast_to(g[:, :, None, None], self.shape).copy(),)


class Linear(Function):
    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
            raise ShapeError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad):
        return grad @ self.w, grad.T @ self.x, grad.sum(axis=0)


class SoftmaxCrossEntropy(Function):
    """Mean cross-entropy of integer labels under softmax(logits)."""

    def forward(self, logits, labels: np.ndarray = None):
        n, classes = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ShapeError(f"labels shape {labels.shape} does not match {n} logits rows")
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise ValueError(f"label outside [0, {classes})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        self.probs = np.exp(log_probs)
        self.labels = labels
        return np.asarray(-log_probs[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1
        return (d * (grad / n),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def total(x: Tensor) -> Tensor:
    return Total.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def scale(x: Tensor, factor: np.ndarray) -> Tensor:
    return Scale.apply(x, factor=factor)


def concat(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat of an empty list")
    return Concat.apply(*inputs)


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    return Narrow.apply(x, start=start, stop=stop)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, weight, stride=stride, padding=padding)


def batchnorm(x: Tensor, state: BatchNormState, train: bool) -> Tensor:
    return BatchNorm.apply(x, state.gamma, state.beta, state=state, train=train)


def avgpool2x2(x: Tensor) -> Tensor:
    return AvgPool2x2.apply(x)


def global_avgpool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=labels)
