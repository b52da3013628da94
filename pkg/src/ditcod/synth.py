"""Seeded synthetic camouflage scenes.

Each scene is a band-passed noise texture; the object is a random shape whose
pixels carry the same texture lifted by a small luminance offset.
"""

from __future__ import annotations

import glob
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy import ndimage

from . import pnm
from .canny import canny

SHAPES = ("ellipse", "blob")
AREA_RANGE = (0.02, 0.60)
MAX_SHAPE_TRIES = 1000


@dataclass
class SynthConfig:
    n_samples: int = 64
    image_size: int = 64
    octaves: int = 3
    base_frequency: int = 4
    contrast_delta: float = 0.12
    shape: str = "blob"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.contrast_delta <= 0.2):
            raise ValueError(f"contrast_delta must lie in (0, 0.2], got {self.contrast_delta}")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.n_samples < 1 or self.image_size < 8:
            raise ValueError("need n_samples >= 1 and image_size >= 8")
        if self.octaves < 1 or self.base_frequency < 1:
            raise ValueError("octaves and base_frequency must be positive")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for sample ``index``; independent of how samples are scheduled."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sample_id(index: int) -> str:
    return f"{index:05d}"


def worker_count() -> int:
    """Worker cap from ``DITCOD_THREADS``; defaults to 1 (serial)."""
    raw = os.environ.get("DITCOD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DITCOD_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def texture(rng: np.random.Generator, size: int, octaves: int, base_frequency: int) -> np.ndarray:
    """Three-channel band-passed noise in [0, 1], shape ``(3, size, size)``.

    Octave ``o`` is white noise on a ``base*2^o`` grid upsampled with cubic
    splines, so its spectrum is concentrated near that frequency. Amplitudes
    halve per octave; the mean is removed before rescaling.
    """
    field = np.zeros((size, size))
    for o in range(octaves):
        n = min(base_frequency * 2**o, size)
        coarse = rng.standard_normal((n, n))
        fine = ndimage.zoom(coarse, size / n, order=3, mode="grid-wrap", grid_mode=True)
        field += 0.5**o * fine[:size, :size]
    field -= field.mean()
    field /= np.abs(field).max() + 1e-12
    lum = 0.45 + 0.25 * field
    tint = 1.0 + 0.15 * rng.uniform(-1.0, 1.0, size=3)
    return np.clip(lum[None] * tint[:, None, None], 0.0, 1.0)


def _ellipse(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    ay, ax = rng.uniform(0.12, 0.35, size=2) * size
    theta = rng.uniform(0.0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _inside_polygon(px: np.ndarray, py: np.ndarray, vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Even-odd ray casting test for many points against one polygon."""
    inside = np.zeros(px.shape, dtype=bool)
    j = len(vx) - 1
    for i in range(len(vx)):
        crosses = (vy[i] > py) != (vy[j] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = vx[i] + (py - vy[i]) * (vx[j] - vx[i]) / (vy[j] - vy[i])
        inside ^= crosses & (px < x_at)
        j = i
    return inside


def _blob(rng: np.random.Generator, size: int) -> np.ndarray:
    """Star-shaped polygon whose radius follows a closed random walk."""
    n = 24
    angles = np.sort(rng.uniform(0.0, 2 * np.pi, size=n))
    steps = rng.normal(0.0, 0.12, size=n)
    walk = np.cumsum(steps - steps.mean())
    radius = rng.uniform(0.15, 0.32) * size * np.exp(walk)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    vx = cx + radius * np.cos(angles)
    vy = cy + radius * np.sin(angles)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return _inside_polygon(xx, yy, vx, vy)


def random_mask(rng: np.random.Generator, size: int, shape: str) -> np.ndarray:
    draw = _ellipse if shape == "ellipse" else _blob
    for _ in range(MAX_SHAPE_TRIES):
        mask = draw(rng, size)
        if AREA_RANGE[0] <= mask.mean() <= AREA_RANGE[1]:
            return mask.astype(np.float64)
    raise RuntimeError("could not draw a shape within the area bounds")


def make_sample(cfg: SynthConfig, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(image (3,H,W), gt (1,H,W), boundary (1,H,W))`` for one index."""
    rng = sample_rng(cfg.seed, index)
    tex = texture(rng, cfg.image_size, cfg.octaves, cfg.base_frequency)
    mask = random_mask(rng, cfg.image_size, cfg.shape)
    img = np.clip(tex + cfg.contrast_delta * mask[None], 0.0, 1.0)
    return img, mask[None], canny(mask)[None]


def _write_sample(cfg: SynthConfig, out_dir: str, index: int) -> str:
    sid = sample_id(index)
    img, gt, bnd = make_sample(cfg, index)
    pnm.save_image(os.path.join(out_dir, "img", f"{sid}.ppm"), img)
    pnm.save_image(os.path.join(out_dir, "gt", f"{sid}.pgm"), gt)
    pnm.save_image(os.path.join(out_dir, "bnd", f"{sid}.pgm"), bnd)
    return sid


def gen_dataset(cfg: SynthConfig, out_dir: str) -> Dict:
    """Write ``img/``, ``gt/``, ``bnd/`` and ``manifest.json`` under ``out_dir``.

    Samples may be produced concurrently (see ``DITCOD_THREADS``); every file
    depends only on its own derived seed, so the output is schedule-free.
    """
    for sub in ("img", "gt", "bnd"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    indices = range(cfg.n_samples)
    workers = worker_count()
    if workers == 1:
        ids = [_write_sample(cfg, out_dir, i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ids = list(pool.map(lambda i: _write_sample(cfg, out_dir, i), indices))
    manifest = {"generator": asdict(cfg), "ids": ids}
    write_manifest(out_dir, manifest)
    return manifest


def write_manifest(out_dir: str, manifest: Dict) -> None:
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def gen_boundaries(mask_dir: str, out_dir: str) -> List[str]:
    """Write ``out_dir/{id}.pgm = canny(mask)`` for every ``mask_dir/{id}.pgm``."""
    files = sorted(glob.glob(os.path.join(mask_dir, "*.pgm")))
    if not files:
        raise FileNotFoundError(f"no .pgm masks in {mask_dir}")
    os.makedirs(out_dir, exist_ok=True)
    ids = []
    for path in files:
        sid = os.path.splitext(os.path.basename(path))[0]
        gt = (pnm.load_image(path)[0] >= 0.5).astype(np.float64)
        pnm.save_image(os.path.join(out_dir, f"{sid}.pgm"), canny(gt))
        ids.append(sid)
    return ids
