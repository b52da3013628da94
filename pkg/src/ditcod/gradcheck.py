"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import NumericalError, Tensor, no_grad

# Relative error uses max(|analytic|, |numeric|, REL_FLOOR) as denominator so
# coordinates whose true gradient is ~0 are judged on absolute error. At
# eps=1e-5 the round-off in a central difference is about 1e-10 * |f|, so
# the floor keeps exactly-zero gradients (e.g. a softmax key bias) from
# failing on noise while every gradient above 1e-5 is held to full tolerance.
REL_FLOOR = 1e-5


@dataclass
class GradcheckReport:
    max_rel_err: float
    tol: float
    per_input: Dict[str, float] = field(default_factory=dict)
    n_coords: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} coords={self.n_coords}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"f is non-finite near coordinate {i}")
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor] | Dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradcheckReport:
    """Compare ``backward`` of the scalar closure ``f`` with finite differences.

    ``inputs`` are the tensors ``f`` reads; each must have ``requires_grad``.
    With ``max_coords`` only a random subset of each input's coordinates is
    perturbed.
    """
    if not isinstance(inputs, dict):
        inputs = {f"input{i}": t for i, t in enumerate(inputs)}
    for t in inputs.values():
        t.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar closure, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericalError("f is non-finite at the check point")
    out.backward()

    rng = rng if rng is not None else np.random.default_rng(0)
    worst, per_input, total = 0.0, {}, 0
    for name, t in inputs.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        numeric = numerical_gradient(f, t, eps, coords)
        if coords is None:
            err = relative_error(analytic, numeric)
            total += t.size
        else:
            err = relative_error(analytic.reshape(-1)[coords], numeric.reshape(-1)[coords])
            total += len(coords)
        per_input[name] = float(err.max()) if err.size else 0.0
        worst = max(worst, per_input[name])
    return GradcheckReport(worst, tol, per_input, total)
