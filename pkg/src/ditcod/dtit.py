"""Dual-task interactive transformer and prediction heads.

Object and boundary maps are cut into ``P x P`` patches, embedded, and passed
through ``L`` layers in which each branch queries the patch-concatenation of
both branches' normalised tokens (cross multi-head self-attention). Both
branches update synchronously from the previous layer's states.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from . import functional as F
from .nn import BConv, Conv2d, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import ShapeError, Tensor

DECODER_MODES = ("DTIT", "EarlyFuse", "LateFuse")


@dataclass
class DtitConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    patch: int = 2
    mlp_ratio: int = 4
    head_channels: int = 64

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"embedding dim {self.dim} not divisible by {self.heads} heads")
        if self.layers < 1 or self.patch < 1:
            raise ValueError("layers and patch size must be positive")

    @classmethod
    def desk(cls) -> "DtitConfig":
        return cls(layers=2, dim=64, heads=4, patch=2)

    @classmethod
    def paper(cls) -> "DtitConfig":
        return cls(layers=6, dim=768, heads=12, patch=2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSeq:
    tokens: Tensor
    grid: Tuple[int, int]
    branch: str = "object"

    def __post_init__(self):
        if self.tokens.shape[-2] != self.grid[0] * self.grid[1]:
            raise ShapeError(f"{self.tokens.shape[-2]} tokens do not fill a {self.grid} grid")


class CMSALayer(Module):
    """Per-branch parameters of one interactive layer."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = Linear(rng, dim, dim, bias=False)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim, bias=False)
        self.proj = Linear(rng, dim, dim)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim)

    def cmsa(self, z_own: Tensor, z_other: Optional[Tensor]) -> Tensor:
        """Queries from ``z_own``; keys/values from [own; other] (or own only)."""
        if z_other is not None and z_other.shape != z_own.shape:
            raise ShapeError(f"branch token shapes differ: {z_own.shape} vs {z_other.shape}")
        own = self.norm1(z_own)
        kv = own if z_other is None else F.concat_patch(own, self.norm1(z_other))
        out, self.last_weights = F.attention(self.q(own), self.k(kv), self.v(kv), self.heads)
        return self.proj(out)

    def mlp(self, u: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(u)))

    def forward(self, z_own: Tensor, z_other: Optional[Tensor] = None) -> Tensor:
        u = self.cmsa(z_own, z_other) + z_own
        return self.mlp(self.norm2(u)) + u


def cmsa(z_own: Tensor, z_other: Tensor, layer: CMSALayer) -> Tensor:
    return layer.cmsa(z_own, z_other)


def dtit_layer(z_o: Tensor, z_e: Tensor, layer_o: CMSALayer, layer_e: CMSALayer) -> Tuple[Tensor, Tensor]:
    """Synchronous update: both branches read the pre-layer states."""
    return layer_o(z_o, z_e), layer_e(z_e, z_o)


class PredictHead(Module):
    """Tokens -> grid -> BConv -> 3x3 conv -> bilinear upsample -> sigmoid."""

    def __init__(self, rng, dim: int, hidden: int, factor: int):
        super().__init__()
        self.factor = factor
        self.bconv = BConv(rng, dim, hidden)
        self.conv = Conv2d(rng, hidden, 1, 3)

    def forward(self, seq: TokenSeq) -> Tensor:
        x = F.tokens_to_grid(seq.tokens, seq.grid)
        return F.sigmoid(F.upsample_bilinear(self.conv(self.bconv(x)), self.factor))


def predict_head(seq: TokenSeq, head: PredictHead, target_size: Tuple[int, int]) -> Tensor:
    out = head(seq)
    if tuple(out.shape[-2:]) != tuple(target_size):
        raise ShapeError(f"prediction head produced {out.shape[-2:]}, expected {target_size}")
    return out


class Branch(Module):
    """Embedding, position table, layer stack and head of one task branch."""

    def __init__(self, rng, c_in: int, grid: Tuple[int, int], cfg: DtitConfig, name: str):
        super().__init__()
        self.name = name
        self.grid = tuple(grid)
        self.patch = cfg.patch
        self.embed = Linear(rng, cfg.patch * cfg.patch * c_in, cfg.dim)
        self.pos = Parameter(trunc_normal(rng, (grid[0] * grid[1], cfg.dim)))
        self.n_layers = cfg.layers
        for i in range(cfg.layers):
            setattr(self, f"layer{i + 1}", CMSALayer(rng, cfg.dim, cfg.heads, cfg.mlp_ratio))
        self.head = PredictHead(rng, cfg.dim, cfg.head_channels, 4 * cfg.patch)

    def layer(self, i: int) -> CMSALayer:
        return getattr(self, f"layer{i + 1}")

    def embed_tokens(self, feat: Tensor) -> TokenSeq:
        x = feat if feat.ndim == 4 else feat.reshape(1, *feat.shape)
        P = self.patch
        grid = (x.shape[-2] // P, x.shape[-1] // P) if x.shape[-2] % P == 0 and x.shape[-1] % P == 0 else None
        if grid is None:
            raise ShapeError(f"patch size {P} does not divide {x.shape[-2]}x{x.shape[-1]}")
        if grid != self.grid:
            raise ShapeError(f"feature map gives a {grid} token grid, branch was built for {self.grid}")
        return TokenSeq(self.embed(F.patchify(x, P)) + self.pos, grid, self.name)


def embed(feat: Tensor, branch: Branch) -> TokenSeq:
    return branch.embed_tokens(feat)


class DualTaskDecoder(Module):
    """Decoder in one of three modes.

    ``DTIT``: two interacting branches. ``EarlyFuse``: object and boundary
    maps concatenated along channels into a single non-interacting branch
    (no boundary output). ``LateFuse``: two independent branches whose final
    token grids are channel-concatenated and mixed by a 1x1 conv before the
    object head.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, grid: Tuple[int, int], cfg: DtitConfig, mode: str = "DTIT"):
        super().__init__()
        if mode not in DECODER_MODES:
            raise ValueError(f"unknown decoder mode {mode!r}; expected one of {DECODER_MODES}")
        self.mode = mode
        self.cfg = cfg
        if mode == "EarlyFuse":
            self.obj = Branch(rng, 2 * c_in, grid, cfg, "object")
        else:
            self.obj = Branch(rng, c_in, grid, cfg, "object")
            self.bnd = Branch(rng, c_in, grid, cfg, "boundary")
        if mode == "LateFuse":
            self.late_fuse = Conv2d(rng, 2 * cfg.dim, cfg.dim, 1)

    def forward(self, f_obj: Tensor, f_bnd: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        if self.mode == "EarlyFuse":
            z = self.obj.embed_tokens(F.concat_channel(f_obj, f_bnd))
            t = z.tokens
            for i in range(self.cfg.layers):
                t = self.obj.layer(i)(t)
            return self.obj.head(TokenSeq(t, z.grid, "object")), None

        zo = self.obj.embed_tokens(f_obj)
        ze = self.bnd.embed_tokens(f_bnd)
        to, te = zo.tokens, ze.tokens
        for i in range(self.cfg.layers):
            if self.mode == "DTIT":
                to, te = dtit_layer(to, te, self.obj.layer(i), self.bnd.layer(i))
            else:
                to, te = self.obj.layer(i)(to), self.bnd.layer(i)(te)
        s_bnd = self.bnd.head(TokenSeq(te, ze.grid, "boundary"))
        if self.mode == "LateFuse":
            grid_o = F.tokens_to_grid(to, zo.grid)
            grid_e = F.tokens_to_grid(te, ze.grid)
            to = F.grid_to_tokens(self.late_fuse(F.concat_channel(grid_o, grid_e)))
        return self.obj.head(TokenSeq(to, zo.grid, "object")), s_bnd

    def kv_length(self) -> int:
        """Key/value sequence length seen by the last object-branch layer call."""
        return self.obj.layer(self.cfg.layers - 1).last_weights.shape[-1]


def decoder_variant(mode: str, f_obj: Tensor, f_bnd: Tensor, decoder: DualTaskDecoder):
    if decoder.mode != mode:
        raise ValueError(f"decoder was built in mode {decoder.mode!r}, not {mode!r}")
    return decoder(f_obj, f_bnd)
