"""Hierarchical transformer encoder producing a 4-level feature pyramid.

A scaled-down stand-in for MiT: overlapping patch merging, attention with a
strided-convolution sequence reduction on keys/values, and a feed-forward
block mixing tokens with a 3x3 depthwise convolution. No positional encoding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from . import functional as F
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor


@dataclass
class BackboneConfig:
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 64, 128])
    stage_depths: List[int] = field(default_factory=lambda: [1, 1, 1, 1])
    patch_kernels: List[int] = field(default_factory=lambda: [7, 3, 3, 3])
    patch_strides: List[int] = field(default_factory=lambda: [4, 2, 2, 2])
    reduction_ratios: List[int] = field(default_factory=lambda: [8, 4, 2, 1])
    heads: List[int] = field(default_factory=lambda: [1, 2, 4, 8])
    mlp_ratio: int = 4
    in_channels: int = 3

    def __post_init__(self):
        for name in ("stage_channels", "stage_depths", "patch_kernels", "patch_strides", "reduction_ratios", "heads"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs 4 entries")
        if int(np.prod(self.patch_strides)) != 32:
            raise ValueError(f"patch strides {self.patch_strides} must multiply to 32")
        for k, s in zip(self.patch_kernels, self.patch_strides):
            if k <= s:
                raise ValueError(f"patch kernel {k} must exceed stride {s} so patches overlap")
        for c, h in zip(self.stage_channels, self.heads):
            if c % h:
                raise ValueError(f"stage width {c} not divisible by {h} heads")

    @classmethod
    def mit_b5(cls) -> "BackboneConfig":
        """Full-scale layout of the MiT-B5 encoder."""
        return cls(
            stage_channels=[64, 128, 320, 512],
            stage_depths=[3, 6, 40, 3],
            reduction_ratios=[8, 4, 2, 1],
            heads=[1, 2, 5, 8],
        )

    def to_dict(self) -> dict:
        return asdict(self)


class FeaturePyramid(list):
    """Four feature maps at strides 4, 8, 16 and 32 (finest first)."""

    def __init__(self, levels):
        levels = list(levels)
        if len(levels) != 4:
            raise ShapeError(f"a pyramid has 4 levels, got {len(levels)}")
        super().__init__(levels)

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        return [t.shape for t in self]


class EfficientSelfAttention(Module):
    """Multi-head self-attention whose keys/values come from a token grid
    shrunk by a strided ``r x r`` convolution (identity when ``r == 1``)."""

    def __init__(self, rng, dim: int, heads: int, ratio: int):
        super().__init__()
        self.heads = heads
        self.ratio = ratio
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        if ratio > 1:
            self.sr = Conv2d(rng, dim, dim, ratio, stride=ratio, pad=0)
            self.sr_norm = LayerNorm(dim)

    def forward(self, x: Tensor, grid: Tuple[int, int]) -> Tensor:
        kv = x
        if self.ratio > 1:
            g = F.tokens_to_grid(x, grid)
            kv = self.sr_norm(F.grid_to_tokens(self.sr(g)))
        out, self.last_weights = F.attention(self.q(x), self.k(kv), self.v(kv), self.heads)
        return self.proj(out)


class MixFFN(Module):
    def __init__(self, rng, dim: int, ratio: int):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = Linear(rng, dim, hidden)
        self.dw = Conv2d(rng, hidden, hidden, 3, groups=hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def forward(self, x: Tensor, grid: Tuple[int, int]) -> Tensor:
        h = self.fc1(x)
        h = F.grid_to_tokens(self.dw(F.tokens_to_grid(h, grid)))
        return self.fc2(F.gelu(h))


class Block(Module):
    def __init__(self, rng, dim: int, heads: int, ratio: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = EfficientSelfAttention(rng, dim, heads, ratio)
        self.norm2 = LayerNorm(dim)
        self.ffn = MixFFN(rng, dim, mlp_ratio)

    def forward(self, x: Tensor, grid: Tuple[int, int]) -> Tensor:
        x = x + self.attn(self.norm1(x), grid)
        return x + self.ffn(self.norm2(x), grid)


class Stage(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int, depth: int, heads: int, ratio: int, mlp_ratio: int):
        super().__init__()
        self.merge = Conv2d(rng, c_in, c_out, kernel, stride=stride, pad=kernel // 2, exact=False)
        self.merge_norm = LayerNorm(c_out)
        self.depth = depth
        for i in range(depth):
            setattr(self, f"block{i + 1}", Block(rng, c_out, heads, ratio, mlp_ratio))
        self.norm = LayerNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        g = self.merge(x)
        grid = g.shape[-2:]
        t = self.merge_norm(F.grid_to_tokens(g))
        for i in range(self.depth):
            t = getattr(self, f"block{i + 1}")(t, grid)
        return F.tokens_to_grid(self.norm(t), grid)


class Encoder(Module):
    """One stream (foreground or background) of the twin backbone."""

    def __init__(self, rng: np.random.Generator, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c_prev = cfg.in_channels
        for i in range(4):
            stage = Stage(
                rng,
                c_prev,
                cfg.stage_channels[i],
                cfg.patch_kernels[i],
                cfg.patch_strides[i],
                cfg.stage_depths[i],
                cfg.heads[i],
                cfg.reduction_ratios[i],
                cfg.mlp_ratio,
            )
            setattr(self, f"stage{i + 1}", stage)
            c_prev = cfg.stage_channels[i]

    def forward(self, image: Tensor) -> FeaturePyramid:
        H, W = image.shape[-2:]
        if H % 32 or W % 32:
            raise ShapeError(f"image extents {H}x{W} must be divisible by 32")
        x = image if image.ndim == 4 else image.reshape(1, *image.shape)
        levels = []
        for i in range(4):
            x = getattr(self, f"stage{i + 1}")(x)
            levels.append(x)
        return FeaturePyramid(levels)


def encode(image: Tensor, encoder: Encoder) -> FeaturePyramid:
    return encoder(image)


class StreamHead(Module):
    """1x1 conv to one channel, bilinear upsample, sigmoid (loss-only output)."""

    def __init__(self, rng, c_in: int, factor: int):
        super().__init__()
        self.factor = factor
        self.conv = Conv2d(rng, c_in, 1, 1)

    def forward(self, f4: Tensor) -> Tensor:
        return F.sigmoid(F.upsample_bilinear(self.conv(f4), self.factor))


def stream_head(f4: Tensor, head: StreamHead, target_size: Tuple[int, int]) -> Tensor:
    out = head(f4)
    if tuple(out.shape[-2:]) != tuple(target_size):
        raise ShapeError(f"stream head produced {out.shape[-2:]}, expected {target_size}")
    return out
