"""Full network: twin encoders, boundary generation, aggregation, decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .aggregation import AggConfig, BranchAggregator
from .backbone import BackboneConfig, Encoder, StreamHead
from .boundary import BoundaryEncodingAdapter, BoundaryGenerator, BoundaryHeads
from .dtit import DECODER_MODES, DtitConfig, DualTaskDecoder
from .nn import Module
from .tensor import ShapeError, Tensor, no_grad

BOUNDARY_MODES = ("Minus", "BoundaryEncoding")


@dataclass
class ModelConfig:
    image_size: int = 64
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    agg: AggConfig = field(default_factory=AggConfig)
    dtit: DtitConfig = field(default_factory=DtitConfig.desk)
    decoder_variant: str = "DTIT"
    boundary_variant: str = "Minus"

    def __post_init__(self):
        if self.image_size % 32:
            raise ValueError(f"image size {self.image_size} must be divisible by 32")
        if self.decoder_variant not in DECODER_MODES:
            raise ValueError(f"unknown decoder variant {self.decoder_variant!r}")
        if self.boundary_variant not in BOUNDARY_MODES:
            raise ValueError(f"unknown boundary variant {self.boundary_variant!r}")
        if (self.image_size // 4) % self.dtit.patch:
            raise ValueError(f"patch size {self.dtit.patch} does not divide the stride-4 map")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(
            image_size=256,
            backbone=BackboneConfig.mit_b5(),
            agg=AggConfig(c_f=64, c_out=64),
            dtit=DtitConfig.paper(),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(
            image_size=d["image_size"],
            backbone=BackboneConfig(**d["backbone"]),
            agg=AggConfig(**d["agg"]),
            dtit=DtitConfig(**d["dtit"]),
            decoder_variant=d.get("decoder_variant", "DTIT"),
            boundary_variant=d.get("boundary_variant", "Minus"),
        )


@dataclass
class Outputs:
    """All maps are ``(B, 1, H, W)`` probabilities at input resolution."""

    obj: Tensor
    bnd: Optional[Tensor]
    fg: Tensor
    bg: Optional[Tensor]
    bnd_levels: List[Tensor]


class _Pair(Module):
    pass


class CODNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        bb, c_f = cfg.backbone, cfg.agg.c_f
        self.fg = Encoder(rng, bb)
        if cfg.boundary_variant == "Minus":
            self.bg = Encoder(rng, bb)
            self.bnd = BoundaryGenerator(rng, bb.stage_channels, c_f)
        else:
            self.benc = Encoder(rng, bb)
            self.bnd = BoundaryEncodingAdapter(rng, bb.stage_channels, c_f)
        self.head_fg = StreamHead(rng, bb.stage_channels[3], 32)
        if cfg.boundary_variant == "Minus":
            self.head_bg = StreamHead(rng, bb.stage_channels[3], 32)
        self.bnd_heads = BoundaryHeads(rng, c_f)
        self.agg = _Pair()
        self.agg.obj = BranchAggregator(rng, bb.stage_channels, cfg.agg)
        self.agg.bnd = BranchAggregator(rng, [c_f] * 4, cfg.agg)
        grid = (cfg.image_size // 4 // cfg.dtit.patch,) * 2
        self.dtit = DualTaskDecoder(rng, cfg.agg.c_out, grid, cfg.dtit, cfg.decoder_variant)

    def forward(self, image: Tensor) -> Outputs:
        x = image if image.ndim == 4 else image.reshape(1, *image.shape)
        if x.shape[-2:] != (self.cfg.image_size,) * 2:
            raise ShapeError(f"model built for {self.cfg.image_size}px inputs, got {x.shape[-2:]}")
        fo = self.fg(x)
        if self.cfg.boundary_variant == "Minus":
            fb = self.bg(x)
            fe = self.bnd(fo, fb)
            s_bg = self.head_bg(fb[3])
        else:
            fe = self.bnd(self.benc(x))
            s_bg = None
        s_fg = self.head_fg(fo[3])
        levels = self.bnd_heads(fe)
        F_obj = self.agg.obj(fo)
        F_bnd = self.agg.bnd(fe)
        s_obj, s_bnd = self.dtit(F_obj, F_bnd)
        return Outputs(s_obj, s_bnd, s_fg, s_bg, levels)

    def predict(self, image: Tensor) -> Outputs:
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return self.forward(image)
        finally:
            self.train(was_training)
