"""Small numpy layer engine with hand-written backward passes.

Every op is a pair of functions: ``*_forward`` returns ``(out, cache)`` and
``*_backward`` consumes that cache. Arrays are NCHW, row-major. Ops keep the
dtype of their input, so the model runs in float32 while gradient checks can
run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    trainable: bool = True
    decay: bool = False  # weight decay only for conv/linear weights
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0


# --------------------------------------------------------------------------
# convolution


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x, kernels, stride=1, padding=0, keep_cols=True):
    """2-D cross-correlation via im2col.

    ``kernels`` may be a Parameter or a raw (F, C, kh, kw) array. The patch
    matrix is only kept in the cache when ``keep_cols`` is set, i.e. when a
    kernel gradient will be needed.
    """
    w = kernels.value if isinstance(kernels, Parameter) else kernels
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and FCkk kernels, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels but kernels expect {ck}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel does not fit input {h}x{wd} with padding {padding}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if kh == kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho * wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # (N, C, kh, kw, Ho, Wo) so each sample's patch matrix is (C*kh*kw, Ho*Wo)
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(f, -1), cols).reshape(n, f, ho, wo)
    cache = (x.shape, w, stride, padding, cols if keep_cols else None)
    return out, cache


def conv2d_backward(dout, cache, need_dx=True):
    """Returns ``(dx, dw)``; either is None when not requested/available."""
    x_shape, w, stride, padding, cols = cache
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dflat = dout.reshape(n, f, ho * wo)
    dw = None
    if cols is not None:
        dw = np.tensordot(dflat, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    dx = None
    if need_dx:
        dcols = np.matmul(w.reshape(f, -1).T, dflat).reshape(n, c, kh, kw, ho, wo)
        if kh == kw == 1 and stride == 1:
            dxp = dcols[:, :, 0, 0]
        else:
            dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    return dx, dw


# --------------------------------------------------------------------------
# batch normalization


@dataclass(eq=False)
class BatchNormState:
    """Per-channel affine parameters plus running statistics of one BN site."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        return cls(Parameter(np.ones(channels, DTYPE)), Parameter(np.zeros(channels, DTYPE)),
                   np.zeros(channels, DTYPE), np.ones(channels, DTYPE), eps, momentum)

    @property
    def channels(self) -> int:
        return int(self.gamma.value.shape[0])

    def copy(self, trainable: bool = True) -> "BatchNormState":
        return BatchNormState(Parameter(self.gamma.value.copy(), trainable),
                              Parameter(self.beta.value.copy(), trainable),
                              self.running_mean.copy(), self.running_var.copy(),
                              self.eps, self.momentum)


def _bcast(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_forward(x, state: BatchNormState, mode: str = "train"):
    """Normalize each channel (axis 1) over every other axis.

    Train mode uses population statistics of the batch and updates the
    running estimates in place; eval mode reads the running estimates only.
    """
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm: expected {state.channels} channels on axis 1, got shape {x.shape}")
    nd = x.ndim
    gamma = state.gamma.value.astype(x.dtype, copy=False)
    beta = state.beta.value.astype(x.dtype, copy=False)
    if mode == "eval":
        # fold the running statistics into one per-channel affine map
        scale = gamma / np.sqrt(state.running_var.astype(x.dtype) + x.dtype.type(state.eps))
        shift = beta - state.running_mean.astype(x.dtype) * scale
        out = x * _bcast(scale, nd)
        out += _bcast(shift, nd)
        return out, ("eval",)
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    n, c = x.shape[:2]
    count = x.size // c
    if count < 2:
        raise DegenerateBatchError("batchnorm in train mode needs at least 2 values per channel")
    mean = x.reshape(n, c, -1).sum(axis=(0, 2)) / count
    xhat = x - _bcast(mean, nd)
    var = np.einsum("ncl,ncl->c", xhat.reshape(n, c, -1), xhat.reshape(n, c, -1)) / count
    inv = 1.0 / np.sqrt(var + x.dtype.type(state.eps))
    xhat *= _bcast(inv, nd)
    out = xhat * _bcast(gamma, nd)
    out += _bcast(beta, nd)
    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * var
    return out, ("train", xhat, inv, gamma)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)`` for a train-mode forward."""
    if cache[0] != "train":
        raise ValueError("batchnorm_backward requires a train-mode forward cache")
    _, xhat, inv, gamma = cache
    nd = dout.ndim
    n, c = dout.shape[:2]
    count = dout.size // c
    d3 = dout.reshape(n, c, -1)
    dbeta = d3.sum(axis=(0, 2))
    dgamma = np.einsum("ncl,ncl->c", d3, xhat.reshape(n, c, -1))
    dx = dout * dout.dtype.type(count)
    dx -= _bcast(dbeta, nd)
    dx -= xhat * _bcast(dgamma, nd)
    dx *= _bcast(gamma * inv / count, nd)
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# activations and pooling


def relu_forward(x):
    mask = x > 0
    return np.maximum(x, x.dtype.type(0)), mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool_forward(x, size=2, stride=None, padding=0):
    """Max pooling; ties go to the first position in row-major window order."""
    stride = size if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = _out_size(h, size, stride, padding), _out_size(w, size, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool: window {size} does not fit {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x
    views = [xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
             for i in range(size) for j in range(size)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    # first maximal offset via r_k = [v_k != max] * (1 + r_{k+1}), walked from the back
    arg = np.zeros((n, c, ho, wo), dtype=np.uint8)
    for v in views[-2::-1]:
        arg += 1
        arg *= np.not_equal(v, out).view(np.uint8)
    return out, (x.shape, arg, size, stride, padding)


def maxpool_backward(dout, cache):
    shape, arg, size, stride, padding = cache
    n, c, h, w = shape
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(size):
        for j in range(size):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            hit = np.equal(arg, i * size + j)
            if stride >= size:
                np.multiply(dout, hit, out=dxp[sl])
            else:
                dxp[sl] += dout * hit
    return dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp


def global_avgpool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def global_avgpool_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], shape).copy()


# --------------------------------------------------------------------------
# linear + loss


def linear_forward(x, weight, bias):
    w = weight.value if isinstance(weight, Parameter) else weight
    b = bias.value if isinstance(bias, Parameter) else bias
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, targets):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch size {n}")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target index out of range [0, {k})")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits.astype(np.float64))
    rows = np.arange(n)
    loss = float(-logp[rows, targets].mean())
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class SGDConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: Sequence[int] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.learning_rate * self.decay_factor ** passed


class SGD:
    """Momentum SGD over a fixed parameter list; frozen parameters are skipped."""

    def __init__(self, params: Iterable[Parameter], config: SGDConfig):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self._velocity: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, epoch: int):
        sgd_step(self.params, self.config, epoch, self._velocity)


def sgd_step(params: Iterable[Parameter], config: SGDConfig, epoch: int, velocity: dict | None = None):
    """One functional SGD step; ``velocity`` (keyed by id) persists momentum between calls."""
    velocity = {} if velocity is None else velocity
    lr = config.lr_at(epoch)
    for p in params:
        if not p.trainable:
            continue
        g = p.grad + config.weight_decay * p.value if (config.weight_decay and p.decay) else p.grad
        v = velocity.get(id(p))
        v = g.copy() if v is None else config.momentum * v + g
        velocity[id(p)] = v
        p.value -= (lr * v).astype(p.value.dtype, copy=False)
    return velocity
