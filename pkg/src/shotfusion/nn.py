"""Layers shared by both branches.

Parameterized layers are small :class:`Module` subclasses; the math lives in
plain functions (``linear``, ``batchnorm``, ``conv3d`` ...) that take the
module as their parameter bundle.  Batch norm, softmax, conv3d and adaptive
pooling are primitives with hand-written backward rules; everything else is
composed from tape ops.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

from . import kernels
from .autodiff import (
    DEFAULT_DTYPE,
    ContractError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    leaky_relu,
    matmul,
    mul,
    record_op,
    reduce_mean,
    relu,
    sigmoid,
    stack,
    transpose,
)

ACTIVATIONS = ("relu", "leaky_relu", "swish", "sigmoid")
LEAKY_SLOPE = 0.01


class Module:
    """Minimal parameter container.

    Parameters are grad-requiring tensors stored as attributes; child modules
    (and lists of them) are walked recursively.  Buffers are plain arrays named
    in ``_buffer_names`` and saved with checkpoints but never optimized.
    """

    _buffer_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad and val.is_leaf:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mname, mod in self.named_modules():
            for b in mod._buffer_names:
                yield (f"{mname}.{b}" if mname else b), getattr(mod, b)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    @contextmanager
    def frozen(self):
        """Temporarily stop parameters from requiring grad (inputs-only backward)."""
        params = list(self.named_parameters())
        for _, p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for _, p in params:
                p.requires_grad = True

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        mname, _, bname = name.rpartition(".")
        mod = dict(self.named_modules())[mname]
        current = getattr(mod, bname)
        if current.shape != value.shape:
            raise ShapeError(f"buffer {name}: expected {current.shape}, got {value.shape}")
        setattr(mod, bname, value.astype(current.dtype))


# -- initialization ------------------------------------------------------------

def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def param(arr: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


# -- linear ----------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = param(xavier_uniform((out_features, in_features), in_features, out_features,
                                           rng, dtype))
        self.bias = param(np.zeros(out_features, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self)


def linear(x: Tensor, p: Linear) -> Tensor:
    """x @ W^T + b over the last axis of x."""
    x = as_tensor(x)
    if x.shape[-1] != p.weight.shape[1]:
        raise ShapeError(f"linear expects last dim {p.weight.shape[1]}, got input shape {x.shape}")
    return add(matmul(x, transpose(p.weight)), p.bias)


# -- activations -------------------------------------------------------------------

def activation(x: Tensor, kind: str, slope: float = LEAKY_SLOPE) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "swish":
        return mul(x, sigmoid(x))
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def masked_softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis`` restricted to entries where ``mask`` is True.

    Masked-out entries get exactly zero weight.  Every slice along ``axis``
    must keep at least one entry.
    """
    xd = x.data
    if mask is None:
        shifted = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, xd.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("softmax slice with no unmasked entries")
        m = np.where(mask, xd, -np.inf).max(axis=axis, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, xd - m, 0.0)), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", y.astype(xd.dtype, copy=False), (x,), fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(x, axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=axis, keepdims=True))
    out = xd - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record_op("log_softmax", out, (x,), fn)


# -- batch norm ----------------------------------------------------------------------

class BatchNorm(Module):
    """Per-channel batch norm over axis 1 of [N, C] or [N, C, ...] inputs."""

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = param(np.ones(channels, dtype=dtype))
        self.beta = param(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(x, self)


def batchnorm(x: Tensor, s: BatchNorm) -> Tensor:
    if x.ndim < 2 or x.shape[1] != s.channels:
        raise ShapeError(f"batchnorm over {s.channels} channels got input shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, s.channels) + (1,) * (x.ndim - 2)
    xd = x.data
    gamma = s.gamma.data.reshape(bshape)
    beta = s.beta.data.reshape(bshape)
    if s.training:
        if x.shape[0] < 2:
            raise ContractError("batchnorm in train mode needs a batch of at least 2")
        count = xd.size // s.channels
        mean = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        s.running_mean = ((1 - s.momentum) * s.running_mean
                          + s.momentum * mean.reshape(-1)).astype(s.running_mean.dtype)
        s.running_var = ((1 - s.momentum) * s.running_var
                         + s.momentum * var.reshape(-1) * count / (count - 1)).astype(s.running_var.dtype)
    else:
        count = None
        mean = s.running_mean.reshape(bshape)
        var = s.running_var.reshape(bshape)
    inv_std = 1.0 / np.sqrt(var + s.eps)
    xhat = (xd - mean) * inv_std
    out = gamma * xhat + beta

    def fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma
        if count is None:
            dx = dxhat * inv_std
        else:
            dx = inv_std / count * (count * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return record_op("batchnorm", out, (x, s.gamma, s.beta), fn)


# -- dropout -------------------------------------------------------------------------

_dropout_state = threading.local()


@contextmanager
def dropout_disabled():
    """Test hook: make every dropout call an identity (finite-difference runs)."""
    prev = getattr(_dropout_state, "off", False)
    _dropout_state.off = True
    try:
        yield
    finally:
        _dropout_state.off = prev


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0 or getattr(_dropout_state, "off", False):
        return x
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return mul(x, Tensor._wrap(scale))


# -- conv3d --------------------------------------------------------------------------

def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or 3 values, got {v}")
    return v


def conv_output_extent(d: int, k: int, s: int, p: int) -> int:
    return (d + 2 * p - k) // s + 1


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           method: str = "auto") -> Tensor:
    """3D cross-correlation of [C, T, H, W] or [N, C, T, H, W] input with [Co, Ci, kt, kh, kw]."""
    stride, padding = _triple(stride), _triple(padding)
    unbatched = x.ndim == 4
    if x.ndim not in (4, 5):
        raise ShapeError(f"conv3d input must be 4D or 5D, got {x.shape}")
    xd = x.data[None] if unbatched else x.data
    if w.ndim != 5 or w.shape[1] != xd.shape[1]:
        raise ShapeError(f"conv3d kernel {w.shape} does not match input channels of {x.shape}")
    ksize = w.shape[2:]
    padded = tuple(d + 2 * p for d, p in zip(xd.shape[2:], padding))
    if any(k > d for k, d in zip(ksize, padded)):
        raise ShapeError(f"kernel {ksize} larger than padded input {padded}")
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(xd, pads) if any(padding) else np.ascontiguousarray(xd)
    wd = w.data.astype(xd.dtype, copy=False)
    out = kernels.conv3d_forward(xp, wd, stride, method)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
    T, H, W = xd.shape[2:]
    pt, ph, pw = padding

    def fn(g):
        g5 = np.ascontiguousarray(g[None] if unbatched else g)
        gx = None
        if x.requires_grad:
            gxp = kernels.conv3d_backward_input(g5, wd, xp.shape, stride, method)
            gx = gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
            gx = np.ascontiguousarray(gx[0] if unbatched else gx)
        gw = kernels.conv3d_backward_weight(g5, xp, ksize, stride, method) if w.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g5.sum(axis=(0, 2, 3, 4)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return record_op("conv3d", out[0] if unbatched else out, inputs, fn)


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel, rng: np.random.Generator, stride=1,
                 padding=0, bias: bool = False, dtype=DEFAULT_DTYPE):
        super().__init__()
        k = _triple(kernel)
        vol = k[0] * k[1] * k[2]
        self.stride = _triple(stride)
        self.padding = _triple(padding)
        self.weight = param(xavier_uniform((out_ch, in_ch) + k, in_ch * vol, out_ch * vol, rng, dtype))
        self.bias = param(np.zeros(out_ch, dtype=dtype)) if bias else None
        self.method = "auto"

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding, self.method)


# -- pooling ---------------------------------------------------------------------------

def adaptive_bins(d_in: int, d_out: int) -> list[tuple[int, int]]:
    """Contiguous bins [floor(i*D/O), ceil((i+1)*D/O)) covering an axis of length D."""
    return [((i * d_in) // d_out, -((-(i + 1) * d_in) // d_out)) for i in range(d_out)]


def adaptive_avg_pool3d(x: Tensor, out_shape) -> Tensor:
    """Average over adaptive bins of the last three axes."""
    out_shape = _triple(out_shape)
    if any(o <= 0 for o in out_shape):
        raise ShapeError(f"adaptive pool output extents must be positive, got {out_shape}")
    in_shape = x.shape[-3:]
    if any(o > d for o, d in zip(out_shape, in_shape)):
        raise ShapeError(f"adaptive pool output {out_shape} exceeds input {in_shape}")
    xd = x.data
    lead = xd.shape[:-3]
    if out_shape == (1, 1, 1):
        out = xd.mean(axis=(-3, -2, -1), keepdims=True)
        n = float(np.prod(in_shape))

        def fn(g):
            return (np.broadcast_to(g / n, xd.shape).copy(),)

        return record_op("adaptive_avg_pool3d", out, (x,), fn)
    bins = [adaptive_bins(d, o) for d, o in zip(in_shape, out_shape)]
    out = np.empty(lead + out_shape, dtype=xd.dtype)
    for i, (t0, t1) in enumerate(bins[0]):
        for j, (h0, h1) in enumerate(bins[1]):
            for k, (w0, w1) in enumerate(bins[2]):
                out[..., i, j, k] = xd[..., t0:t1, h0:h1, w0:w1].mean(axis=(-3, -2, -1))

    def fn(g):
        gx = np.zeros_like(xd)
        for i, (t0, t1) in enumerate(bins[0]):
            for j, (h0, h1) in enumerate(bins[1]):
                for k, (w0, w1) in enumerate(bins[2]):
                    n = (t1 - t0) * (h1 - h0) * (w1 - w0)
                    gx[..., t0:t1, h0:h1, w0:w1] += (g[..., i, j, k] / n)[..., None, None, None]
        return (gx,)

    return record_op("adaptive_avg_pool3d", out, (x,), fn)


def mean_pool(seq: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of a nonempty list of same-shape tensors."""
    if len(seq) == 0:
        raise ContractError("mean_pool of an empty sequence")
    if len(seq) == 1:
        return seq[0]
    return reduce_mean(stack(list(seq), axis=0), axis=0)
