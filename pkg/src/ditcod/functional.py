"""Differentiable tensor operations used by the network.

Image-like operands are ``(C, H, W)`` or batched ``(B, C, H, W)``; token
sequences are ``(N, D)`` or ``(B, N, D)``.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, unbroadcast

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- elementwise --------------------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    a = x.data
    return Tensor.make(np.log(a), (x,), lambda g: (g / a,))


def sigmoid(x: Tensor) -> Tensor:
    a = x.data
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return Tensor.make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.make(out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
    return Tensor.make(a * cdf, (x,), lambda g: (g * (cdf + a * pdf),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = x.data
    inside = (a >= lo) & (a <= hi)
    return Tensor.make(np.clip(a, lo, hi), (x,), lambda g: (g * inside,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.make(np.matmul(A, B), (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``(in, out)``."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


# -- joining ------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor.make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def concat_channel(a: Tensor, b: Tensor) -> Tensor:
    """Stack feature maps along the channel axis (``a`` first)."""
    return concat([a, b], axis=-3)


def concat_patch(a: Tensor, b: Tensor) -> Tensor:
    """Stack token sequences along the token axis, ``a``'s rows first."""
    return concat([a, b], axis=-2)


# -- normalisation ------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed max-shifted."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.make(out, (a,), backward)


def _normalize(x: np.ndarray, axes: Tuple[int, ...], eps: float):
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean) * inv, inv, mean, var


def _normalize_backward(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
    return inv * (g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True))


def layernorm(z: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise each row over the last axis, then apply ``gamma``/``beta``."""
    d = z.shape[-1]
    if d < 2:
        raise ShapeError("layernorm needs at least two features per row")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    xhat, inv, _, _ = _normalize(z.data, (-1,), eps)
    G = gamma.data
    out = xhat * G + beta.data

    def backward(g):
        gx = _normalize_backward(g * G, xhat, inv, (-1,)) if z.requires_grad else None
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor.make(out, (z, gamma, beta), backward)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation of ``(C,H,W)`` or ``(B,C,H,W)`` maps.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance); otherwise the buffers are used.
    """
    c_axis = x.ndim - 3
    C = x.shape[c_axis]
    if gamma.shape != (C,):
        raise ShapeError(f"batchnorm has {gamma.shape[0]} channels, input has {C}")
    axes = tuple(i for i in range(x.ndim) if i != c_axis)
    bshape = [1] * x.ndim
    bshape[c_axis] = C
    G = gamma.data.reshape(bshape)
    if training:
        xhat, inv, mean, var = _normalize(x.data, axes, eps)
        n = x.size // C
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.reshape(C)
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv
    out = xhat * G + beta.data.reshape(bshape)

    def backward(g):
        gx = None
        if x.requires_grad:
            if training:
                gx = _normalize_backward(g * G, xhat, inv, axes)
            else:
                gx = g * G * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor.make(out, (x, gamma, beta), backward)


# -- convolution --------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, pad: int, exact: bool = True) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded extent {n + 2 * pad}")
    if exact and span % stride:
        raise ShapeError(f"extent {n} with kernel {k}, stride {stride}, pad {pad} gives non-integer output size")
    return span // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
    exact: bool = True,
) -> Tensor:
    """2-D cross-correlation (no kernel flip), zero padding.

    ``w`` is ``(C_out, C_in/groups, k, k)``. With ``exact=False`` a stride that
    does not tile the padded input drops the trailing rows/columns instead of
    raising.
    """
    squeeze = x.ndim == 3
    X = x.data[None] if squeeze else x.data
    if X.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) or (B,C,H,W), got {x.shape}")
    Bn, C, H, W = X.shape
    Co, Cg, kh, kw = w.shape
    if kh != kw:
        raise ShapeError("only square kernels are supported")
    k = kh
    if C % groups or Co % groups or C // groups != Cg:
        raise ShapeError(f"channel mismatch: input {C}, weight {w.shape}, groups {groups}")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"bias shape {b.shape} does not match {Co} output channels")
    Ho = conv_output_size(H, k, stride, pad, exact)
    Wo = conv_output_size(W, k, stride, pad, exact)

    Xp = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else X
    sl = [(slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride)) for i in range(k) for j in range(k)]

    if groups == C and Cg == 1 and Co == C:
        return _depthwise(x, w, b, Xp, sl, (Bn, C, H, W, Ho, Wo, k, pad), squeeze)

    # columns laid out (C, k*k, B, Ho, Wo) so each group is one GEMM
    cols = np.empty((C, k * k, Bn, Ho, Wo))
    Xt = Xp.transpose(1, 0, 2, 3)
    for n, (si, sj) in enumerate(sl):
        cols[:, n] = Xt[:, :, si, sj]
    K, L = Cg * k * k, Bn * Ho * Wo
    cols = cols.reshape(groups, K, L)
    Wm = w.data.reshape(groups, Co // groups, K)
    out = np.matmul(Wm, cols).reshape(Co, Bn, Ho, Wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[:, None, None]
    out = out[0] if squeeze else np.ascontiguousarray(out)

    def backward(g):
        g4 = g[None] if squeeze else g
        gm = g4.transpose(1, 0, 2, 3).reshape(groups, Co // groups, L)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(w.shape) if w.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(Wm.transpose(0, 2, 1), gm).reshape(C, k * k, Bn, Ho, Wo)
            gxp = np.zeros((C, Bn) + Xp.shape[2:])
            for n, (si, sj) in enumerate(sl):
                gxp[:, :, si, sj] += gcols[:, n]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
            gx = gx[0] if squeeze else gx
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.make(out, parents, backward)


def _depthwise(x, w, b, Xp, sl, dims, squeeze):
    Bn, C, H, W, Ho, Wo, k, pad = dims
    wk = w.data.reshape(C, k * k)
    out = np.zeros((Bn, C, Ho, Wo))
    for n, (si, sj) in enumerate(sl):
        out += Xp[:, :, si, sj] * wk[:, n, None, None]
    if b is not None:
        out += b.data[:, None, None]
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gw = np.empty((C, k * k)) if w.requires_grad else None
        gxp = np.zeros_like(Xp) if x.requires_grad else None
        for n, (si, sj) in enumerate(sl):
            if gw is not None:
                gw[:, n] = np.einsum("bchw,bchw->c", g4, Xp[:, :, si, sj])
            if gxp is not None:
                gxp[:, :, si, sj] += g4 * wk[:, n, None, None]
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
            gx = gx[0] if squeeze else gx
        gb = g4.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, (gw.reshape(w.shape) if gw is not None else None), gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.make(out, parents, backward)


# -- resampling ---------------------------------------------------------------


@lru_cache(maxsize=None)
def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """``(factor*n, n)`` interpolation matrix, align-corners=false."""
    m = np.zeros((n * factor, n))
    for dst in range(n * factor):
        src = max((dst + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[dst, i0] += 1.0 - lam
        m[dst, i1] += lam
    m.setflags(write=False)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of the last two axes by an integer factor."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor!r}")
    if x.ndim < 2:
        raise ShapeError(f"upsample needs at least 2 axes, got {x.shape}")
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    Ah = _bilinear_matrix(H, int(factor))
    Aw = _bilinear_matrix(W, int(factor))
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)
    return Tensor.make(out, (x,), lambda g: (np.matmul(np.matmul(Ah.T, g), Aw),))


# -- attention ----------------------------------------------------------------


def split_heads(t: Tensor, heads: int) -> Tensor:
    """``(..., N, D)`` -> ``(..., heads, N, D/heads)``."""
    *lead, n, d = t.shape
    if d % heads:
        raise ShapeError(f"width {d} is not divisible by {heads} heads")
    t = t.reshape(*lead, n, heads, d // heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return t.transpose(axes)


def merge_heads(t: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, h, n, dh = t.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return t.transpose(axes).reshape(*lead, n, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``heads`` heads.

    ``q`` is ``(..., N, D)``; ``k`` and ``v`` are ``(..., M, D)``. Returns the
    merged ``(..., N, D)`` output and the ``(..., heads, N, M)`` weights.
    """
    if k.shape != v.shape or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape} are incompatible")
    d_head = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_head))
    weights = softmax_rows(logits)
    return merge_heads(matmul(weights, vh)), weights


# -- token/grid conversion ----------------------------------------------------


def patchify(x: Tensor, p: int) -> Tensor:
    """``(B,C,H,W)`` -> ``(B, H/p*W/p, p*p*C)``; patches row-major, each
    flattened as (row-in-patch, col-in-patch, channel)."""
    Bn, C, H, W = x.shape
    if H % p or W % p:
        raise ShapeError(f"patch size {p} does not divide spatial extent {H}x{W}")
    t = x.reshape(Bn, C, H // p, p, W // p, p).transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(Bn, (H // p) * (W // p), p * p * C)


def tokens_to_grid(z: Tensor, grid: Tuple[int, int]) -> Tensor:
    """``(B, N, D)`` -> ``(B, D, gh, gw)`` inverting row-major token order."""
    Bn, N, D = z.shape
    gh, gw = grid
    if gh * gw != N:
        raise ShapeError(f"grid {gh}x{gw} is inconsistent with {N} tokens")
    return z.transpose(0, 2, 1).reshape(Bn, D, gh, gw)


def grid_to_tokens(x: Tensor) -> Tensor:
    """``(B, C, H, W)`` -> ``(B, H*W, C)``."""
    Bn, C, H, W = x.shape
    return x.reshape(Bn, C, H * W).transpose(0, 2, 1)
