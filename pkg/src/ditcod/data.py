"""Dataset directories, samples and geometric augmentation."""

from __future__ import annotations

import glob
import json
import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from . import pnm
from .canny import canny

CROP_AREA = 0.9
MAX_ROTATION_DEG = 15.0


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    gt: np.ndarray  # (1, H, W) binary
    boundary: np.ndarray  # (1, H, W) binary
    id: str

    def __post_init__(self):
        h, w = self.image.shape[-2:]
        if self.image.shape != (3, h, w) or self.gt.shape != (1, h, w) or self.boundary.shape != (1, h, w):
            raise DataError(
                f"sample {self.id}: inconsistent shapes {self.image.shape}, {self.gt.shape}, {self.boundary.shape}"
            )
        if not np.all((self.gt == 0) | (self.gt == 1)):
            raise DataError(f"sample {self.id}: ground truth is not binary")


def list_ids(data_dir: str) -> List[str]:
    """Ids from ``manifest.json`` if present, else from ``img/*.ppm``."""
    path = os.path.join(data_dir, "manifest.json")
    if os.path.exists(path):
        with open(path) as fh:
            return list(json.load(fh)["ids"])
    files = sorted(glob.glob(os.path.join(data_dir, "img", "*.ppm")))
    if not files:
        raise DataError(f"no images found under {data_dir}/img")
    return [os.path.splitext(os.path.basename(f))[0] for f in files]


def load_sample(data_dir: str, sid: str) -> Sample:
    """Read one sample; masks are thresholded at 0.5 and a missing boundary
    map is computed from the mask."""
    try:
        image = pnm.load_image(os.path.join(data_dir, "img", f"{sid}.ppm"))
        gt = pnm.load_image(os.path.join(data_dir, "gt", f"{sid}.pgm"))
        bnd_path = os.path.join(data_dir, "bnd", f"{sid}.pgm")
        boundary = pnm.load_image(bnd_path) if os.path.exists(bnd_path) else None
    except (OSError, pnm.PNMError) as exc:
        raise DataError(str(exc)) from exc
    if image.shape[0] != 3:
        raise DataError(f"{sid}: expected an RGB image")
    gt = (gt[:1] >= 0.5).astype(np.float64)
    boundary = canny(gt) if boundary is None else (boundary[:1] >= 0.5).astype(np.float64)
    return Sample(image, gt, boundary, sid)


def load_dataset(data_dir: str, ids: List[str] = None) -> List[Sample]:
    return [load_sample(data_dir, sid) for sid in (ids if ids is not None else list_ids(data_dir))]


def stack(samples: List[Sample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.gt for s in samples]),
        np.stack([s.boundary for s in samples]),
    )


def affine_map(
    h: int, w: int, flip: bool, crop_side: float, y0: float, x0: float, angle: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Output-to-input pixel map for flip, crop-and-resize, then rotation.

    ``crop_side`` is the crop's side as a fraction of the image side, ``(y0,
    x0)`` its top-left corner in pixels and ``angle`` the rotation in radians.
    """
    ch, cw = crop_side * h, crop_side * w
    c, s = np.cos(angle), np.sin(angle)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    rot = np.array([[c, -s], [s, c]])
    # resize: the output grid samples pixel centres of the crop window
    scale = np.diag([ch / h, cw / w])
    origin = np.array([y0, x0]) + 0.5 * np.array([ch / h, cw / w]) - 0.5
    matrix = scale @ rot
    offset = origin + scale @ (centre - rot @ centre)
    if flip:
        mirror = np.diag([1.0, -1.0])
        matrix = mirror @ matrix
        offset = mirror @ offset + np.array([0.0, w - 1.0])
    return matrix, offset


def warp(sample: Sample, matrix: np.ndarray, offset: np.ndarray) -> Sample:
    """Apply one geometric map to image and mask, then recompute the boundary."""
    image = np.stack(
        [ndimage.affine_transform(ch, matrix, offset, order=1, mode="nearest") for ch in sample.image]
    )
    gt = ndimage.affine_transform(sample.gt[0], matrix, offset, order=0, mode="nearest")
    gt = (gt >= 0.5).astype(np.float64)
    return Sample(np.clip(image, 0.0, 1.0), gt[None], canny(gt)[None], sample.id)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random flip (p=0.5), 0.9-area crop resized back, and rotation within
    +-15 degrees. Bilinear for the image, nearest for the mask; the boundary is
    recomputed from the transformed mask."""
    _, h, w = sample.image.shape
    flip = bool(rng.random() < 0.5)
    side = float(np.sqrt(CROP_AREA))
    y0 = rng.uniform(0.0, h * (1.0 - side))
    x0 = rng.uniform(0.0, w * (1.0 - side))
    angle = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    return warp(sample, *affine_map(h, w, flip, side, y0, x0, angle))
