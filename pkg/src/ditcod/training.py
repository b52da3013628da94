"""Training configuration, the training loop, checkpoints and prediction."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence

import numpy as np

from . import dtz, pnm
from .data import Sample, augment, load_dataset, stack
from .losses import LossReport, total_loss
from .model import CODNet, ModelConfig
from .optim import Adam
from .tensor import NumericalError, Tensor

PRESETS = ("desk", "paper")


@dataclass
class TrainConfig:
    """Training run settings. ``max_steps`` (if set) caps the optimizer steps
    across epochs; ``ppa_window`` defaults to 15 for desk and 31 for paper."""

    image_size: int = 64
    batch_size: int = 4
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    preset: str = "desk"
    data_dir: str = "data"
    out_dir: str = "run"
    decoder_variant: str = "DTIT"
    boundary_variant: str = "Minus"
    augment: bool = True
    max_steps: Optional[int] = None
    ppa_window: Optional[int] = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValueError("batch_size and epochs must be positive and lr > 0")
        if self.ppa_window is None:
            self.ppa_window = 15 if self.preset == "desk" else 31
        if self.ppa_window < 1 or self.ppa_window % 2 == 0:
            raise ValueError("ppa_window must be a positive odd number")
        self.model_config()  # validates the variants and image size

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = dict(image_size=256, batch_size=4, epochs=100, lr=6e-5, preset="paper")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if d.get("preset") == "paper":
            return cls.paper(**d)
        return cls(**d)

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self) -> ModelConfig:
        build = ModelConfig.desk if self.preset == "desk" else ModelConfig.paper
        return build(
            image_size=self.image_size,
            decoder_variant=self.decoder_variant,
            boundary_variant=self.boundary_variant,
        )


@dataclass
class TrainResult:
    model: CODNet
    reports: List[LossReport]
    steps: int


def _dump_batch(out_dir: str, samples: Sequence[Sample], report: LossReport, step: int) -> str:
    path = os.path.join(out_dir, "diagnostic")
    images, gts, bnds = stack(samples)
    info = {"step": step, "ids": [s.id for s in samples], "loss": report.components() + [report.total]}
    dtz.save_checkpoint(path, {"images": images, "gt": gts, "boundary": bnds}, info)
    return path


def train(cfg: TrainConfig, samples: Optional[Sequence[Sample]] = None, log=None) -> TrainResult:
    """Run Adam on the dataset, writing ``loss.csv`` and ``checkpoint/`` under
    ``cfg.out_dir``.

    Batches follow a seeded per-epoch shuffle. A non-finite loss dumps the
    offending batch to ``diagnostic/`` and raises ``NumericalError``.
    """
    if samples is None:
        samples = load_dataset(cfg.data_dir)
    if not samples:
        raise ValueError("training set is empty")
    size = samples[0].image.shape[-1]
    if size != cfg.image_size:
        raise ValueError(f"dataset images are {size}px but the config expects {cfg.image_size}px")
    os.makedirs(cfg.out_dir, exist_ok=True)

    model = CODNet(cfg.model_config(), seed=cfg.seed)
    model.train()
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    reports: List[LossReport] = []
    step = 0
    with open(os.path.join(cfg.out_dir, "loss.csv"), "w") as csv:
        csv.write(LossReport.CSV_HEADER + "\n")
        for _ in range(cfg.epochs):
            order = rng.permutation(len(samples))
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                batch = [samples[i] for i in order[start : start + cfg.batch_size]]
                if cfg.augment:
                    batch = [augment(s, rng) for s in batch]
                images, gts, bnds = stack(batch)
                opt.zero_grad()
                out = model(Tensor(images))
                loss, report = total_loss(out, gts, bnds, cfg.ppa_window)
                step += 1
                if not np.isfinite(report.total):
                    where = _dump_batch(cfg.out_dir, batch, report, step)
                    raise NumericalError(f"non-finite loss at step {step}; batch written to {where}")
                loss.backward()
                opt.step()
                reports.append(report)
                csv.write(report.csv_row(step) + "\n")
                if log is not None:
                    log(step, report)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    save_model(model, os.path.join(cfg.out_dir, "checkpoint"), {"train": cfg.to_dict(), "steps": step})
    return TrainResult(model, reports, step)


def save_model(model: CODNet, directory: str, extra: Optional[dict] = None) -> None:
    manifest = {"model": model.cfg.to_dict()}
    manifest.update(extra or {})
    dtz.save_checkpoint(directory, model.state_dict(), manifest)


def load_model(directory: str) -> CODNet:
    tensors, manifest = dtz.load_checkpoint(directory)
    model = CODNet(ModelConfig.from_dict(manifest["model"]))
    model.load_state_dict(tensors)
    model.eval()
    return model


def predict_maps(model: CODNet, images: np.ndarray):
    """``(obj, bnd)`` probability maps of shape ``(B, H, W)``; ``bnd`` is
    ``None`` for variants without a boundary branch output."""
    out = model.predict(Tensor(np.asarray(images, dtype=np.float64)))
    obj = out.obj.data[:, 0]
    bnd = out.bnd.data[:, 0] if out.bnd is not None else None
    return obj, bnd


def predict_dir(model: CODNet, samples: Sequence[Sample], out_dir: str, batch_size: int = 8) -> List[str]:
    """Write ``{id}_obj.pgm`` and ``{id}_bnd.pgm`` per sample; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        obj, bnd = predict_maps(model, np.stack([s.image for s in chunk]))
        for i, s in enumerate(chunk):
            path = os.path.join(out_dir, f"{s.id}_obj.pgm")
            pnm.save_image(path, obj[i])
            written.append(path)
            if bnd is not None:
                path = os.path.join(out_dir, f"{s.id}_bnd.pgm")
                pnm.save_image(path, bnd[i])
                written.append(path)
    return written
