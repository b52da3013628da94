"""Cross-level enhancement and progressive top-down aggregation.

Each branch (object or boundary) projects its pyramid to a common width,
multiplies every level by convolved upsampled copies of all coarser levels,
concatenates top-down, and fuses the finest aggregate into one map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import functional as F
from .nn import BConv, Identity, Module
from .tensor import ShapeError, Tensor


@dataclass
class AggConfig:
    c_f: int = 32
    c_out: int = 32

    def __post_init__(self):
        if self.c_f < 1 or self.c_out < 1:
            raise ValueError("aggregation widths must be positive")


def _check_nested(levels: Sequence[Tensor]) -> None:
    for i in range(3):
        h, w = levels[i].shape[-2:]
        hn, wn = levels[i + 1].shape[-2:]
        if (h, w) != (2 * hn, 2 * wn):
            raise ShapeError(f"level {i + 1} is {h}x{w} but level {i + 2} is {hn}x{wn}; expected a factor of 2")


class _Levels(Module):
    def get(self, name: str) -> Module:
        return getattr(self, name)


class Enhance(Module):
    """``g_i = f_i * prod_{j>i} BConv(Up(f_j))``; ``g_4 = f_4``."""

    def __init__(self, rng, c_f: int):
        super().__init__()
        for i in range(1, 4):
            lvl = _Levels()
            for j in range(i + 1, 5):
                setattr(lvl, f"up{j}", BConv(rng, c_f, c_f))
            setattr(self, f"level{i}", lvl)

    def forward(self, levels: Sequence[Tensor]) -> List[Tensor]:
        _check_nested(levels)
        out = []
        for i in range(1, 4):
            lvl = getattr(self, f"level{i}")
            g = levels[i - 1]
            for j in range(i + 1, 5):
                g = F.hadamard(g, lvl.get(f"up{j}")(F.upsample_bilinear(levels[j - 1], 2 ** (j - i))))
            out.append(g)
        out.append(levels[3])
        return out


class Aggregate(Module):
    """``q_i = Concat(g_i, BConv(Up(q_{i+1})))``; ``q_4 = g_4``. Width of q_i is c_f*(5-i)."""

    def __init__(self, rng, c_f: int):
        super().__init__()
        for i in range(1, 4):
            width = c_f * (4 - i)
            setattr(self, f"level{i}", BConv(rng, width, width))

    def forward(self, g: Sequence[Tensor]) -> List[Tensor]:
        _check_nested(g)
        q = [None, None, None, g[3]]
        for i in (3, 2, 1):
            up = getattr(self, f"level{i}")(F.upsample_bilinear(q[i], 2))
            q[i - 1] = F.concat_channel(g[i - 1], up)
        return q


class BranchAggregator(Module):
    """Projection, enhancement, aggregation and fusion for one branch."""

    def __init__(self, rng: np.random.Generator, in_channels: Sequence[int], cfg: AggConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = _Levels()
        for i, c in enumerate(in_channels):
            setattr(self.proj, f"level{i + 1}", BConv(rng, c, cfg.c_f))
        self.enh = Enhance(rng, cfg.c_f)
        self.agg = Aggregate(rng, cfg.c_f)
        self.fuse = _Levels()
        self.fuse.level1 = BConv(rng, 4 * cfg.c_f, cfg.c_out)

    def use_identity(self) -> "BranchAggregator":
        """Swap every BConv for the identity so wiring can be checked in closed form."""

        def swap(mod: Module):
            for name, child in list(mod.children()):
                if isinstance(child, BConv):
                    setattr(mod, name, Identity())
                else:
                    swap(child)

        swap(self)
        return self

    def project(self, levels: Sequence[Tensor]) -> List[Tensor]:
        return [self.proj.get(f"level{i + 1}")(f) for i, f in enumerate(levels)]

    def forward(self, levels: Sequence[Tensor]) -> Tensor:
        q = self.agg(self.enh(self.project(levels)))
        return self.fuse.level1(q[0])


def enhance(levels: Sequence[Tensor], module: Enhance) -> List[Tensor]:
    return module(levels)


def aggregate(g: Sequence[Tensor], module: Aggregate) -> List[Tensor]:
    return module(g)


def fuse(q1: Tensor, module: BranchAggregator) -> Tensor:
    return module.fuse.level1(q1)
