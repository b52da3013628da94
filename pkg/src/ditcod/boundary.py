"""Boundary features from the difference of foreground and background pyramids."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from . import functional as F
from .backbone import FeaturePyramid
from .nn import BConv, Conv2d, Identity, Module
from .tensor import ShapeError, Tensor


class BoundaryLevel(Module):
    """``c(a(fo) - b(fb))`` for one pyramid level."""

    def __init__(self, rng, c_in: int, c_f: int):
        super().__init__()
        self.a = BConv(rng, c_in, c_f)
        self.b = BConv(rng, c_in, c_f)
        self.c = BConv(rng, c_f, c_f)

    def difference(self, fo: Tensor, fb: Tensor) -> Tensor:
        if fo.shape != fb.shape:
            raise ShapeError(f"foreground {fo.shape} and background {fb.shape} levels differ")
        return self.a(fo) - self.b(fb)

    def forward(self, fo: Tensor, fb: Tensor) -> Tensor:
        return self.c(self.difference(fo, fb))


class BoundaryGenerator(Module):
    def __init__(self, rng: np.random.Generator, stage_channels: Sequence[int], c_f: int = 32):
        super().__init__()
        self.c_f = c_f
        for i, c in enumerate(stage_channels):
            setattr(self, f"level{i + 1}", BoundaryLevel(rng, c, c_f))

    def levels(self) -> List[BoundaryLevel]:
        return [getattr(self, f"level{i + 1}") for i in range(4)]

    def use_identity(self) -> "BoundaryGenerator":
        """Replace every BConv by the identity (wiring tests only)."""
        for lvl in self.levels():
            lvl.a, lvl.b, lvl.c = Identity(), Identity(), Identity()
        return self

    def forward(self, fo: FeaturePyramid, fb: FeaturePyramid) -> FeaturePyramid:
        if len(fo) != 4 or len(fb) != 4:
            raise ShapeError("boundary generation needs two 4-level pyramids")
        return FeaturePyramid(lvl(o, b) for lvl, o, b in zip(self.levels(), fo, fb))


def boundary_features(fo: FeaturePyramid, fb: FeaturePyramid, gen: BoundaryGenerator) -> FeaturePyramid:
    return gen(fo, fb)


class BoundaryEncodingAdapter(Module):
    """Ablation replacement: project a dedicated boundary encoder's pyramid
    to the common width instead of subtracting two streams."""

    def __init__(self, rng, stage_channels: Sequence[int], c_f: int = 32):
        super().__init__()
        for i, c in enumerate(stage_channels):
            setattr(self, f"level{i + 1}", BConv(rng, c, c_f))

    def forward(self, fe: FeaturePyramid) -> FeaturePyramid:
        return FeaturePyramid(getattr(self, f"level{i + 1}")(f) for i, f in enumerate(fe))


class LevelHead(Module):
    """1x1 conv, upsample to the input resolution, sigmoid."""

    def __init__(self, rng, c_in: int, factor: int):
        super().__init__()
        self.factor = factor
        self.conv = Conv2d(rng, c_in, 1, 1)

    def forward(self, fe: Tensor) -> Tensor:
        return F.sigmoid(F.upsample_bilinear(self.conv(fe), self.factor))


class BoundaryHeads(Module):
    def __init__(self, rng, c_f: int):
        super().__init__()
        for i in range(4):
            setattr(self, f"level{i + 1}", LevelHead(rng, c_f, 4 * 2**i))

    def forward(self, fe: FeaturePyramid) -> List[Tensor]:
        return [getattr(self, f"level{i + 1}")(f) for i, f in enumerate(fe)]


def boundary_level_head(fe_i: Tensor, head: LevelHead, target_size: Tuple[int, int]) -> Tensor:
    out = head(fe_i)
    if tuple(out.shape[-2:]) != tuple(target_size):
        raise ShapeError(f"boundary head produced {out.shape[-2:]}, expected {target_size}")
    return out
