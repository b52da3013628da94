"""Canny edge detection for turning object masks into boundary targets."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

TAN_22_5 = math.sqrt(2.0) - 1.0
# Normalised magnitudes are rounded to this many decimals so that
# mathematically equal neighbours compare equal during suppression.
MAG_DECIMALS = 12


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_replicate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(img, ((kernel.shape[0] // 2,) * 2, (kernel.shape[1] // 2,) * 2), mode="edge")
    out = np.zeros_like(img)
    H, W = img.shape
    for i in range(kernel.shape[0]):
        for j in range(kernel.shape[1]):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * padded[i : i + H, j : j + W]
    return out


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate borders."""
    k = gaussian_kernel(sigma)
    tmp = _correlate_replicate(img, k[None, :])
    return _correlate_replicate(tmp, k[:, None])


def gradients(img: np.ndarray):
    """Sobel responses, differencing first so flat regions give exact zeros."""
    p = np.pad(img, 1, mode="edge")
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2.0 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2.0 * dy[:, 1:-1] + dy[:, 2:]
    return gx, gy


def quantize_direction(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Bin gradient orientation (mod 180 degrees) into 0, 1, 2, 3 = 0/45/90/135.

    Uses only |gx|, |gy| and sign(gx*gy) so negating the image leaves the bins
    unchanged.
    """
    ax, ay = np.abs(gx), np.abs(gy)
    bins = np.where(gx * gy > 0, 1, 3)
    bins = np.where(ay <= ax * TAN_22_5, 0, bins)
    bins = np.where(ax <= ay * TAN_22_5, 2, bins)
    return bins


# neighbour offsets (before, after) per direction bin, "before" = smaller row-major index
_OFFSETS = {0: ((0, -1), (0, 1)), 1: ((-1, -1), (1, 1)), 2: ((-1, 0), (1, 0)), 3: ((-1, 1), (1, -1))}


def non_maximum_suppression(mag: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Keep pixels that beat the earlier neighbour strictly and the later one
    weakly along the quantised gradient; ties resolve to one pixel."""
    H, W = mag.shape
    padded = np.pad(mag, 1)
    keep = np.zeros_like(mag, dtype=bool)
    for b, ((dy0, dx0), (dy1, dx1)) in _OFFSETS.items():
        before = padded[1 + dy0 : 1 + dy0 + H, 1 + dx0 : 1 + dx0 + W]
        after = padded[1 + dy1 : 1 + dy1 + H, 1 + dx1 : 1 + dx1 + W]
        keep |= (bins == b) & (mag > before) & (mag >= after)
    return np.where(keep, mag, 0.0)


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = nms >= low
    strong = nms >= high
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(nms)
    connected = np.zeros(n + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    return connected[labels].astype(np.float64)


def canny(mask, sigma: float = 1.0, low: float = 0.1, high: float = 0.3) -> np.ndarray:
    """Binary edge map of a mask; thresholds are fractions of the peak magnitude.

    Accepts ``(H, W)`` or ``(1, H, W)`` input and returns the same shape.
    """
    if not (0.0 <= low < high <= 1.0):
        raise ValueError(f"need 0 <= low < high <= 1, got low={low}, high={high}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    arr = np.asarray(mask, dtype=np.float64)
    squeeze = arr.ndim == 3
    if squeeze:
        if arr.shape[0] != 1:
            raise ValueError(f"expected a single-channel mask, got shape {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected (H,W) or (1,H,W), got shape {arr.shape}")

    # centring makes 1-m an exact negation, so both see identical magnitudes
    # and flat regions get exactly zero gradient
    gx, gy = gradients(blur(arr - 0.5, sigma))
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        edges = np.zeros_like(arr)
    else:
        mag = np.round(mag / peak, MAG_DECIMALS)
        edges = hysteresis(non_maximum_suppression(mag, quantize_direction(gx, gy)), low, high)
    return edges[None] if squeeze else edges
