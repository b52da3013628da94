"""Variant comparisons: the decoder ablation and the boundary-generation ablation.

Every variant is trained with the same data, steps and seeds, then scored on
a fixed held-out split.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from .data import Sample, list_ids, load_dataset
from .dtit import DECODER_MODES
from .model import BOUNDARY_MODES
from .training import TrainConfig, predict_maps, train

KINDS = {"decoder": DECODER_MODES, "boundary": BOUNDARY_MODES}
CSV_HEADER = "variant,seed," + ",".join(metrics.METRIC_NAMES)


@dataclass
class AblationConfig:
    """``n_test`` ids at the end of the dataset are held out; training uses
    up to ``n_train`` of the ids before them."""

    kind: str = "decoder"
    seeds: Tuple[int, ...] = (0, 1, 2)
    n_train: int = 32
    n_test: int = 32
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    augment: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"ablation kind must be one of {sorted(KINDS)}, got {self.kind!r}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds or self.n_train < 1 or self.n_test < 1 or self.steps < 1:
            raise ValueError("seeds, n_train, n_test and steps must be non-empty / positive")

    @property
    def variants(self) -> Tuple[str, ...]:
        return KINDS[self.kind]

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown ablation config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AblationRow:
    variant: str
    seed: int
    scores: Dict[str, float]

    def csv(self) -> str:
        vals = ",".join(f"{self.scores[k]:.6f}" for k in metrics.METRIC_NAMES)
        return f"{self.variant},{self.seed},{vals}"


def split(ids: Sequence[str], n_train: int, n_test: int) -> Tuple[List[str], List[str]]:
    if len(ids) < n_test + 1:
        raise ValueError(f"need more than {n_test} samples for a {n_test}-image held-out split, got {len(ids)}")
    train_ids = list(ids[:-n_test])[:n_train]
    return train_ids, list(ids[-n_test:])


def score(model, samples: Sequence[Sample], batch_size: int = 8) -> metrics.MetricReport:
    reports = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        obj, _ = predict_maps(model, np.stack([s.image for s in chunk]))
        # score the 8-bit maps that `predict` would write
        obj = np.round(obj * 255.0) / 255.0
        reports += [metrics.evaluate(o, s.gt[0], s.id) for o, s in zip(obj, chunk)]
    return metrics.aggregate(reports)


def run_ablation(cfg: AblationConfig, data_dir: str, out_dir: str, log=None) -> List[AblationRow]:
    """Train and score every variant for every seed; writes ``ablation.csv``
    and one run directory per (variant, seed) under ``out_dir``."""
    train_ids, test_ids = split(list_ids(data_dir), cfg.n_train, cfg.n_test)
    train_set = load_dataset(data_dir, train_ids)
    test_set = load_dataset(data_dir, test_ids)
    size = train_set[0].image.shape[-1]
    rows = []
    for variant in cfg.variants:
        for seed in cfg.seeds:
            key = "decoder_variant" if cfg.kind == "decoder" else "boundary_variant"
            tcfg = TrainConfig(
                image_size=size,
                batch_size=cfg.batch_size,
                epochs=cfg.steps,  # max_steps is the binding limit
                lr=cfg.lr,
                seed=seed,
                out_dir=os.path.join(out_dir, f"{variant}_seed{seed}"),
                augment=cfg.augment,
                max_steps=cfg.steps,
                **{key: variant},
            )
            result = train(tcfg, train_set)
            report = score(result.model, test_set)
            rows.append(AblationRow(variant, seed, report.mean))
            if log is not None:
                log(rows[-1])
    write_csv(rows, os.path.join(out_dir, "ablation.csv"))
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        json.dump({"config": asdict(cfg), "train_ids": train_ids, "test_ids": test_ids}, fh, indent=2)
        fh.write("\n")
    return rows


def mean_rows(rows: Sequence[AblationRow]) -> List[AblationRow]:
    out = []
    for variant in dict.fromkeys(r.variant for r in rows):
        sel = [r for r in rows if r.variant == variant]
        out.append(AblationRow(variant, "mean", {k: float(np.mean([r.scores[k] for r in sel])) for k in metrics.METRIC_NAMES}))
    return out


def write_csv(rows: Sequence[AblationRow], path: str) -> None:
    lines = [CSV_HEADER] + [r.csv() for r in rows] + [r.csv() for r in mean_rows(rows)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path: str) -> List[AblationRow]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            if parts[1] == "mean":
                continue
            rows.append(AblationRow(parts[0], int(parts[1]), dict(zip(header[2:], map(float, parts[2:])))))
    return rows


def ordering_holds(
    rows: Sequence[AblationRow], better: str, worse: str, metric: str = "MAE"
) -> Dict[int, Optional[bool]]:
    """Per seed: does ``better`` score no worse than ``worse`` on ``metric``?

    Lower is better for MAE and higher for the other measures.
    """
    by = {(r.variant, r.seed): r.scores[metric] for r in rows}
    out = {}
    for seed in dict.fromkeys(r.seed for r in rows):
        a, b = by.get((better, seed)), by.get((worse, seed))
        if a is None or b is None:
            out[seed] = None
        else:
            out[seed] = bool(a <= b if metric == "MAE" else a >= b)
    return out
