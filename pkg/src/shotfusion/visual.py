"""Visual pathway: small R3D-style residual 3D CNN, adaptive pooling, shot mean."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import DEFAULT_DTYPE, ContractError, ShapeError, Tensor, add, as_tensor, getitem, reshape, stack
from .nn import BatchNorm, Conv3d, Linear, Module, activation, adaptive_avg_pool3d, linear, mean_pool


@dataclass
class Clip:
    voxels: np.ndarray  # [C, T, H, W], values in [0, 1]
    shot_id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 4:
            raise ShapeError(f"clip must be [C, T, H, W], got {self.voxels.shape}")


def _bilinear_resize(img: np.ndarray, H: int, W: int) -> np.ndarray:
    """Resize the last two axes with half-pixel-centered bilinear interpolation."""
    h0, w0 = img.shape[-2:]
    if (h0, w0) == (H, W):
        return img.copy()

    def coords(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(H, h0)
    x0, x1, fx = coords(W, w0)
    top = img[..., y0, :] * (1 - fy)[:, None] + img[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def sample_clip(frames: np.ndarray, T: int, H: int, W: int) -> np.ndarray:
    """Uniformly sample T frames from [F, C, H0, W0] and resize to (H, W) -> [C, T, H, W]."""
    F = frames.shape[0]
    if F == 0:
        raise ContractError("cannot sample a clip from zero frames")
    idx = np.floor((np.arange(T) + 0.5) * F / T).astype(int)
    picked = frames[np.minimum(idx, F - 1)]
    resized = _bilinear_resize(picked, H, W)
    return np.ascontiguousarray(resized.transpose(1, 0, 2, 3))


class ResidualBlock3d(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator,
                 act: str = "leaky_relu", bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.act = act
        self.conv1 = Conv3d(in_ch, out_ch, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.bn1 = BatchNorm(out_ch, bn_momentum, bn_eps, dtype)
        self.conv2 = Conv3d(out_ch, out_ch, 3, rng, stride=1, padding=1, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, bn_momentum, bn_eps, dtype)
        if stride != 1 or in_ch != out_ch:
            self.down_conv = Conv3d(in_ch, out_ch, 1, rng, stride=stride, padding=0, dtype=dtype)
            self.down_bn = BatchNorm(out_ch, bn_momentum, bn_eps, dtype)
        else:
            self.down_conv = None
            self.down_bn = None


def residual_block3d(x: Tensor, p: ResidualBlock3d) -> Tensor:
    h = activation(p.bn1(p.conv1(x)), p.act)
    h = p.bn2(p.conv2(h))
    short = x if p.down_conv is None else p.down_bn(p.down_conv(x))
    if h.shape != short.shape:
        raise ShapeError(f"residual paths disagree: {h.shape} vs {short.shape}")
    return activation(add(h, short), p.act)


class R3D(Module):
    """stem conv -> residual stages -> global average pool -> linear to d_model."""

    def __init__(self, in_channels: int, d_model: int, widths: Sequence[int] = (8, 16),
                 blocks: Sequence[int] = (1, 1), rng: np.random.Generator | None = None,
                 act: str = "leaky_relu", stem_kernel=(3, 7, 7), stem_stride=(1, 2, 2),
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if len(widths) != len(blocks):
            raise ValueError("widths and blocks must have one entry per stage")
        self.act = act
        pad = tuple(k // 2 for k in stem_kernel)
        self.stem = Conv3d(in_channels, widths[0], stem_kernel, rng, stride=stem_stride,
                           padding=pad, dtype=dtype)
        self.stem_bn = BatchNorm(widths[0], bn_momentum, bn_eps, dtype)
        self.blocks = []
        in_ch = widths[0]
        for s, (width, count) in enumerate(zip(widths, blocks)):
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                self.blocks.append(ResidualBlock3d(in_ch, width, stride, rng, act, bn_momentum,
                                                   bn_eps, dtype))
                in_ch = width
        self.proj = Linear(in_ch, d_model, rng, dtype)

    def set_conv_method(self, method: str) -> None:
        for _, mod in self.named_modules():
            if isinstance(mod, Conv3d):
                mod.method = method

    def features(self, x: Tensor) -> Tensor:
        """Activations of the last conv stage, [N, C', T', H', W']."""
        h = activation(self.stem_bn(self.stem(x)), self.act)
        for block in self.blocks:
            h = residual_block3d(h, block)
        return h

    def head(self, feats: Tensor) -> Tensor:
        pooled = adaptive_avg_pool3d(feats, (1, 1, 1))
        return linear(reshape(pooled, pooled.shape[:2]), self.proj)


def r3d_forward(c, p: R3D) -> Tensor:
    """One clip [C, T, H, W] (or a batch [N, C, T, H, W]) -> v_k of size d_model."""
    vox = c.voxels if isinstance(c, Clip) else c
    x = as_tensor(vox)
    single = x.ndim == 4
    if single:
        x = reshape(x, (1,) + x.shape)
    out = p.head(p.features(x))
    return getitem(out, 0) if single else out


def shots_mean_pool(vs: Sequence[Tensor]) -> Tensor:
    if len(vs) == 0:
        raise ContractError("shots_mean_pool of an empty list")
    return mean_pool(vs)


class VisualBranch(Module):
    def __init__(self, d_model: int, in_channels: int = 3, widths=(8, 16), blocks=(1, 1),
                 rng: np.random.Generator | None = None, act: str = "leaky_relu",
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.backbone = R3D(in_channels, d_model, widths, blocks, rng, act,
                            bn_momentum=bn_momentum, bn_eps=bn_eps, dtype=dtype)
        self.last_features: Tensor | None = None

    def __call__(self, batch: Sequence[Sequence[np.ndarray]], keep_features: bool = False) -> Tensor:
        """``batch[b]`` is the list of [C, T, H, W] clips of sample b -> [B, d_model]."""
        clips, spans = [], []
        for shots in batch:
            if len(shots) == 0:
                raise ContractError("sample without clips")
            spans.append((len(clips), len(clips) + len(shots)))
            clips.extend(shots)
        x = Tensor._wrap(np.stack([np.asarray(c, dtype=self.backbone.proj.weight.dtype) for c in clips]))
        if keep_features:
            # lets a frozen model still record the path to the kept activations
            x.requires_grad_()
        feats = self.backbone.features(x)
        if keep_features:
            feats.retain_grad()
            self.last_features = feats
        v = self.backbone.head(feats)  # [num clips, d_model]
        if all(b - a == 1 for a, b in spans):
            return v
        return stack([shots_mean_pool([getitem(v, i) for i in range(a, b)]) for a, b in spans], axis=0)
