"""Evaluation measures for binary segmentation maps.

All measures take a prediction ``S`` with values in [0, 1] and a binary mask
``G``. Inputs may carry leading batch axes ``(..., H, W)`` that broadcast
against each other; results have the broadcast batch shape (a Python float
for plain 2-D inputs). Constants and conventions are listed in METRICS.md.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .tensor import ShapeError

EPS = float(np.spacing(1))
ALPHA = 0.5
BETA2 = 1.0
N_THRESHOLDS = 256
# Mid-bin thresholds: binary maps binarise to themselves at every threshold
# and no 8-bit value can sit exactly on one.
THRESHOLDS = (np.arange(N_THRESHOLDS) + 0.5) / N_THRESHOLDS
WF_SIGMA = 5.0
WF_WINDOW = 7
METRIC_NAMES = ("S_alpha", "E_phi", "F_w_beta", "MAE")


def _prepare(S, G) -> Tuple[np.ndarray, np.ndarray]:
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(G)
    if S.ndim < 2 or G.ndim < 2 or S.shape[-2:] != G.shape[-2:]:
        raise ShapeError(f"prediction {S.shape} and ground truth {G.shape} differ")
    if np.any(S < 0) or np.any(S > 1) or np.any(np.isnan(S)):
        raise ValueError("prediction values must lie in [0, 1]")
    if G.dtype != bool:
        if not np.all((G == 0) | (G == 1)):
            raise ValueError("ground truth must be binary")
        G = G == 1
    return S, G


def _out(x: np.ndarray):
    return float(x) if np.ndim(x) == 0 else x


def mae(S, G):
    S, G = _prepare(S, G)
    return _out(np.abs(S - G).mean(axis=(-2, -1)))


def _sum(x: np.ndarray) -> np.ndarray:
    return x.sum(axis=(-2, -1))


def _s_object(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    n = _sum(m)
    mean = _sum(x * m) / np.maximum(n, 1)
    dev = (x - mean[..., None, None]) * m
    sigma = np.sqrt(_sum(dev * dev) / np.maximum(n - 1, 1))
    return 2.0 * mean / (mean * mean + 1.0 + sigma + EPS)


def _ssim(S: np.ndarray, Gf: np.ndarray, m: np.ndarray) -> np.ndarray:
    n = _sum(m)
    div = np.maximum(n, 1)
    x = _sum(S * m) / div
    y = _sum(Gf * m) / div
    dx = (S - x[..., None, None]) * m
    dy = (Gf - y[..., None, None]) * m
    dof = np.maximum(n - 1, 1)
    # a constant block has zero spread, whatever rounding the mean picked up
    flat = np.max(np.where(m > 0, S, -np.inf), axis=(-2, -1)) == np.min(np.where(m > 0, S, np.inf), axis=(-2, -1))
    sx = np.where(flat, 0.0, _sum(dx * dx) / dof)
    sy = _sum(dy * dy) / dof
    sxy = np.where(flat, 0.0, _sum(dx * dy) / dof)
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    score = np.where(a != 0, a / (b + EPS), np.where(b == 0, 1.0, 0.0))
    return np.where(n > 0, score, 0.0)


def s_measure(S, G, alpha: float = ALPHA):
    """Structure measure: ``alpha*object + (1-alpha)*region``, clipped at 0.

    An empty mask scores ``1 - mean(S)``, a full mask ``mean(S)``.
    """
    S, G = _prepare(S, G)
    S, G = np.broadcast_arrays(S, G)
    Gf = G.astype(np.float64)
    H, W = G.shape[-2:]
    frac = Gf.mean(axis=(-2, -1))

    obj = frac * _s_object(S, Gf) + (1.0 - frac) * _s_object(1.0 - S, 1.0 - Gf)

    count = np.maximum(_sum(Gf), 1)
    rows = np.arange(H, dtype=np.float64)[:, None]
    cols = np.arange(W, dtype=np.float64)[None, :]
    # block split after the (rounded) centroid row/column
    y = np.round(_sum(Gf * rows) / count).astype(int) + 1
    x = np.round(_sum(Gf * cols) / count).astype(int) + 1
    top = rows < y[..., None, None]
    left = cols < x[..., None, None]
    region = np.zeros(frac.shape)
    for block in (top & left, top & ~left, ~top & left, ~top & ~left):
        m = block.astype(np.float64)
        region = region + _sum(m) / (H * W) * _ssim(S, Gf, m)

    q = np.maximum(alpha * obj + (1.0 - alpha) * region, 0.0)
    mean_s = S.mean(axis=(-2, -1))
    q = np.where(frac == 0, 1.0 - mean_s, np.where(frac == 1, mean_s, q))
    return _out(q)


def _threshold_counts(S: np.ndarray, G: np.ndarray):
    """Per threshold: predicted positives ``c``, true positives ``tp``, mask size ``g``.

    Pixel ``p`` is positive at threshold ``k`` iff ``S_p >= THRESHOLDS[k]``,
    i.e. iff ``k < b_p`` with ``b_p`` the number of thresholds ``<= S_p``.
    """
    S, G = np.broadcast_arrays(S, G)
    batch = S.shape[:-2]
    N = S.shape[-2] * S.shape[-1]
    b = _thresholds_at_or_below(S).reshape(-1, N)
    fg = G.reshape(-1, N)
    n_img = b.shape[0]
    base = (np.arange(n_img) * (N_THRESHOLDS + 1))[:, None]
    size = n_img * (N_THRESHOLDS + 1)
    hist_all = np.bincount((b + base).ravel(), minlength=size).reshape(n_img, -1)
    hist_fg = np.bincount((b + base)[fg], minlength=size).reshape(n_img, -1)
    # positives at threshold k = pixels with b > k
    c = N - np.cumsum(hist_all, axis=1)[:, :N_THRESHOLDS]
    tp = fg.sum(axis=1, keepdims=True) - np.cumsum(hist_fg, axis=1)[:, :N_THRESHOLDS]
    g = fg.sum(axis=1)
    return (
        c.reshape(*batch, N_THRESHOLDS),
        tp.reshape(*batch, N_THRESHOLDS),
        np.broadcast_to(g.reshape(*batch, 1), (*batch, N_THRESHOLDS)),
        N,
    )


def _enhanced(phi_f: np.ndarray, phi_g: np.ndarray) -> np.ndarray:
    align = 2.0 * phi_f * phi_g / (phi_f * phi_f + phi_g * phi_g + EPS)
    return (align + 1.0) ** 2 / 4.0


def _thresholds_at_or_below(v: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(N_THRESHOLDS * v - 0.5).astype(np.int64) + 1, 0, N_THRESHOLDS)


def e_measure_mean(S, G):
    """Mean enhanced-alignment measure over 256 thresholds.

    Binarising at a threshold keeps the ``c`` largest values, so the score is
    evaluated once per possible ``c`` and weighted by how many thresholds give
    that map.
    """
    S, G = _prepare(S, G)
    S, G = np.broadcast_arrays(S, G)
    batch = S.shape[:-2]
    N = S.shape[-2] * S.shape[-1]
    s = S.reshape(-1, N)
    order = np.argsort(-s, axis=1, kind="stable")
    s_desc = np.take_along_axis(s, order, axis=1)
    g_desc = np.take_along_axis(G.reshape(-1, N), order, axis=1)
    zero = np.zeros((len(s), 1), dtype=np.int64)
    tp = np.concatenate([zero, np.cumsum(g_desc, axis=1)], axis=1)
    g = tp[:, -1:]
    c = np.arange(N + 1)[None, :]
    # thresholds giving exactly c positives lie in (s_desc[c], s_desc[c-1]]
    le = np.concatenate([zero + N_THRESHOLDS, _thresholds_at_or_below(s_desc), zero], axis=1)
    weight = le[:, :-1] - le[:, 1:]

    mu_f = c / N
    mu_g = g / N
    cases = (
        (tp, 1.0 - mu_f, 1.0 - mu_g),
        (c - tp, 1.0 - mu_f, -mu_g),
        (g - tp, -mu_f, 1.0 - mu_g),
        (N - c - g + tp, -mu_f, -mu_g),
    )
    score = sum(n * _enhanced(pf, pg) for n, pf, pg in cases) / N
    score = np.where(g == 0, (N - c) / N, np.where(g == N, c / N, score))
    out = (weight * score).sum(axis=1) / N_THRESHOLDS
    return _out(out.reshape(batch))


def _gauss_window(size: int = WF_WINDOW, sigma: float = WF_SIGMA) -> np.ndarray:
    r = (size - 1) / 2.0
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return k / k.sum()


def nearest_foreground(G: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance to and flat index of the nearest mask pixel, per image.

    Equidistant candidates resolve to the smallest row-major index. Mask
    pixels map to themselves; images with an empty mask get index 0 and
    distance ``inf``.
    """
    G = np.asarray(G, dtype=bool)
    H, W = G.shape[-2:]
    flat = G.reshape(-1, H * W)
    n_img = flat.shape[0]
    dist = np.full(flat.shape, np.inf)
    index = np.zeros(flat.shape, dtype=np.int64)
    img, pix = np.nonzero(flat)
    if len(pix) == 0:
        return dist.reshape(G.shape), index.reshape(G.shape)
    # lay the images out far apart on one plane so one tree serves all
    gap = 2 * (H + W)

    def coords(i, p):
        return np.stack([p // W + i * gap, p % W], axis=1).astype(np.float64)

    tree = cKDTree(coords(img, pix))
    dist[img, pix] = 0.0
    index[img, pix] = pix
    has_fg = np.zeros(n_img, dtype=bool)
    has_fg[img] = True
    qi, qp = np.nonzero(~flat & has_fg[:, None])
    if len(qp):
        pts = coords(qi, qp)
        d, _ = tree.query(pts)
        hits = tree.query_ball_point(pts, d * (1.0 + 1e-9) + 1e-9)
        dist[qi, qp] = d
        index[qi, qp] = pix[[min(h) for h in hits]]
    return dist.reshape(G.shape), index.reshape(G.shape)


def weighted_f(S, G, beta2: float = BETA2):
    """Weighted F-measure with error dependency and distance-based importance.

    An empty mask scores 0.
    """
    S, G = _prepare(S, G)
    H, W = G.shape[-2:]
    dist, index = nearest_foreground(G)
    S_b, G_b = np.broadcast_arrays(S, G)
    shape = S_b.shape
    dist = np.broadcast_to(dist, shape)
    index = np.broadcast_to(index, shape).reshape(*shape[:-2], H * W)
    Gf = G_b.astype(np.float64)

    E = np.abs(S_b - Gf)
    Et = np.take_along_axis(E.reshape(*shape[:-2], H * W), index, axis=-1).reshape(shape)
    Et = np.where(G_b, E, Et)
    kernel = _gauss_window().reshape((1,) * (len(shape) - 2) + (WF_WINDOW, WF_WINDOW))
    EA = ndimage.correlate(Et, kernel, mode="constant", cval=0.0)
    min_e = np.where(G_b & (EA < E), EA, E)
    with np.errstate(over="ignore", invalid="ignore"):
        B = np.where(G_b, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    Ew = min_e * B

    n_fg = _sum(Gf)
    err_fg = _sum(np.where(G_b, Ew, 0.0))
    tpw = n_fg - err_fg
    fpw = _sum(np.where(G_b, 0.0, Ew))
    with np.errstate(invalid="ignore", divide="ignore"):
        R = 1.0 - err_fg / n_fg
        P = tpw / (tpw + fpw + EPS)
        Q = (1.0 + beta2) * R * P / (R + beta2 * P + EPS)
    return _out(np.where(n_fg == 0, 0.0, Q))


def pr_curve(S, G) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, precision, recall)`` at the 256 thresholds.

    Precision is 1 when nothing is predicted; recall is 1 for an empty mask.
    """
    S, G = _prepare(S, G)
    c, tp, g, _ = _threshold_counts(S, G)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(c == 0, 1.0, tp / np.maximum(c, 1))
        recall = np.where(g == 0, 1.0, tp / np.maximum(g, 1))
    return THRESHOLDS.copy(), precision, recall


@dataclass
class MetricReport:
    """Per-image scalar metrics plus per-image PR curves."""

    ids: List[str] = field(default_factory=list)
    scores: np.ndarray = field(default_factory=lambda: np.zeros((0, len(METRIC_NAMES))))
    precision: np.ndarray = field(default_factory=lambda: np.zeros((0, N_THRESHOLDS)))
    recall: np.ndarray = field(default_factory=lambda: np.zeros((0, N_THRESHOLDS)))

    @property
    def mean(self) -> dict:
        return dict(zip(METRIC_NAMES, self.scores.mean(axis=0)))

    @property
    def curve(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dataset PR curve: per-threshold averages over images."""
        return THRESHOLDS.copy(), self.precision.mean(axis=0), self.recall.mean(axis=0)


def evaluate(S, G, image_id: str = "") -> MetricReport:
    """All measures for one ``(H, W)`` (or ``(1, H, W)``) prediction."""
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(G)
    if S.ndim == 3 and S.shape[0] == 1:
        S = S[0]
    if G.ndim == 3 and G.shape[0] == 1:
        G = G[0]
    if S.ndim != 2:
        raise ShapeError(f"expected a single map, got shape {S.shape}")
    scores = [s_measure(S, G), e_measure_mean(S, G), weighted_f(S, G), mae(S, G)]
    _, p, r = pr_curve(S, G)
    return MetricReport([image_id], np.array([scores]), p[None], r[None])


def aggregate(reports: Sequence[MetricReport]) -> MetricReport:
    """Concatenate per-image reports in the given order."""
    if not reports:
        raise ValueError("nothing to aggregate")
    return MetricReport(
        [i for r in reports for i in r.ids],
        np.concatenate([r.scores for r in reports]),
        np.concatenate([r.precision for r in reports]),
        np.concatenate([r.recall for r in reports]),
    )


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def metrics_csv(report: MetricReport) -> str:
    lines = ["id," + ",".join(METRIC_NAMES)]
    for sid, row in zip(report.ids, report.scores):
        lines.append(",".join([sid] + [_fmt(v) for v in row]))
    lines.append(",".join(["MEAN"] + [_fmt(v) for v in report.scores.mean(axis=0)]))
    return "\n".join(lines) + "\n"


def pr_csv(report: MetricReport) -> str:
    t, p, r = report.curve
    lines = ["threshold,precision,recall"]
    lines += [f"{ti:.6f},{_fmt(pi)},{_fmt(ri)}" for ti, pi, ri in zip(t, p, r)]
    return "\n".join(lines) + "\n"


def pr_svg(report: MetricReport, size: int = 320, margin: int = 32) -> str:
    """Precision (y) against recall (x) as a single polyline."""
    _, p, r = report.curve
    span = size - 2 * margin
    pts = " ".join(f"{margin + ri * span:.2f},{size - margin - pi * span:.2f}" for pi, ri in zip(p, r))
    m, far = margin, size - margin
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
        f'<rect x="{m}" y="{m}" width="{span}" height="{span}" fill="none" stroke="#999"/>\n'
        f'<polyline points="{pts}" fill="none" stroke="#c33" stroke-width="1.5"/>\n'
        f'<text x="{size // 2}" y="{size - 8}" text-anchor="middle" font-size="12">recall</text>\n'
        f'<text x="12" y="{size // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size // 2})">precision</text>\n'
        f'<text x="{m}" y="{far + 14}" font-size="10">0</text>\n'
        f'<text x="{far}" y="{far + 14}" font-size="10">1</text>\n'
        "</svg>\n"
    )


def emit(report: MetricReport, out_dir: str) -> None:
    """Write ``metrics.csv``, ``pr.csv`` and ``pr.svg``."""
    os.makedirs(out_dir, exist_ok=True)
    for name, text in (("metrics.csv", metrics_csv(report)), ("pr.csv", pr_csv(report)), ("pr.svg", pr_svg(report))):
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text)
