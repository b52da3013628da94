"""Pixel-position-aware loss, binary cross-entropy and the total objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.ndimage import uniform_filter

from . import functional as F
from .tensor import ShapeError, Tensor

PROB_CLAMP = 1e-7


class ValidationError(ValueError):
    pass


def _check_pair(pred: Tensor, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")


def _as_target(gt) -> np.ndarray:
    return np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)


def ppa_weight(gt: np.ndarray, window: int) -> np.ndarray:
    """``1 + 5*|meanpool(gt) - gt|`` with a zero-padded ``window x window`` mean."""
    size = [1] * (gt.ndim - 2) + [window, window]
    local = uniform_filter(gt, size=size, mode="constant", cval=0.0)
    return 1.0 + 5.0 * np.abs(local - gt)


def bce_map(pred: Tensor, gt: np.ndarray) -> Tensor:
    p = F.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(gt * F.log(p) + (1.0 - gt) * F.log(1.0 - p))


def ppa_loss(pred: Tensor, gt, window: int = 15) -> Tensor:
    """Weighted BCE plus weighted IoU, averaged over images.

    ``pred`` and ``gt`` are ``(1,H,W)`` or ``(B,1,H,W)``; sums run per image
    over the last three axes.
    """
    g = _as_target(gt)
    _check_pair(pred, g)
    if not np.all((g == 0) | (g == 1)):
        raise ValidationError("ground truth for the pixel-position-aware loss must be binary")
    w = ppa_weight(g, window)
    axes = (-3, -2, -1)
    w_sum = w.sum(axis=axes)
    wbce = (bce_map(pred, g) * w).sum(axis=axes) / w_sum
    inter = (pred * (g * w)).sum(axis=axes)
    union = (pred * w).sum(axis=axes) + (g * w).sum(axis=axes)
    wiou = 1.0 - (inter + 1.0) / (union - inter + 1.0)
    return (wbce + wiou).mean()


def bce_loss(pred: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    g = _as_target(gt)
    _check_pair(pred, g)
    return bce_map(pred, g).mean()


@dataclass
class LossReport:
    ppa_final_obj: float
    ce_final_bnd: float
    ppa_fg_stream: float
    ppa_bg_stream: float
    ce_bnd_levels: List[float] = field(default_factory=lambda: [0.0] * 4)
    total: float = 0.0

    CSV_HEADER = "step,ppa_final,ce_final,ppa_fg,ppa_bg,ce_b1,ce_b2,ce_b3,ce_b4,total"

    def components(self) -> List[float]:
        return [self.ppa_final_obj, self.ce_final_bnd, self.ppa_fg_stream, self.ppa_bg_stream, *self.ce_bnd_levels]

    def csv_row(self, step: int) -> str:
        return ",".join([str(step)] + [repr(float(v)) for v in self.components() + [self.total]])


def total_loss(outputs, gt, boundary, window: int = 15):
    """Sum of the five supervision terms with unit weights.

    Returns ``(loss_tensor, LossReport)``. Terms whose output is absent in an
    ablation variant (no boundary map, no background stream) contribute 0.
    """
    g = _as_target(gt)
    b = _as_target(boundary)
    if len(outputs.bnd_levels) != 4:
        raise ValueError("total loss needs four boundary level maps")
    terms: List[Optional[Tensor]] = [
        ppa_loss(outputs.obj, g, window),
        bce_loss(outputs.bnd, b) if outputs.bnd is not None else None,
        ppa_loss(outputs.fg, g, window),
        ppa_loss(outputs.bg, 1.0 - g, window) if outputs.bg is not None else None,
    ]
    terms += [bce_loss(level, b) for level in outputs.bnd_levels]
    present = [t for t in terms if t is not None]
    total = present[0]
    for t in present[1:]:
        total = total + t
    values = [float(t.data) if t is not None else 0.0 for t in terms]
    report = LossReport(values[0], values[1], values[2], values[3], values[4:], 0.0)
    report.total = float(sum(values))
    return total, report
