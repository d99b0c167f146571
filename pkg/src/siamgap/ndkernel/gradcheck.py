"""Central-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class CheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    tolerance: float
    n_checked: int


def _rel_errors(analytic, numeric, floor):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_difference_check(
    f,
    point,
    step=1e-5,
    tolerance=1e-6,
    *,
    analytic=None,
    coords=None,
    floor=1e-7,
):
    """Compare the tape gradient of scalar ``f`` at ``point`` with central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``analytic`` overrides the tape
    gradient (used for negative controls); ``coords`` restricts the check to
    a subset of flat indices. The per-coordinate error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    point = point if isinstance(point, Tensor) else Tensor(point)
    base = point.data.astype(np.float64, copy=True)
    if analytic is None:
        x = Tensor(base.copy(), requires_grad=True)
        with Tape() as tape:
            y = f(x)
        tape.backward(y)
        analytic = np.zeros_like(base) if x.grad is None else x.grad
    analytic = np.asarray(analytic, dtype=np.float64).reshape(base.shape)

    flat_idx = np.arange(base.size) if coords is None else np.asarray(coords)
    numeric = np.empty(len(flat_idx))
    for k, i in enumerate(flat_idx):
        shifted = base.copy().reshape(-1)
        shifted[i] += step
        f_plus = float(f(Tensor(shifted.reshape(base.shape))).data)
        shifted[i] -= 2 * step
        f_minus = float(f(Tensor(shifted.reshape(base.shape))).data)
        numeric[k] = (f_plus - f_minus) / (2 * step)

    a = analytic.reshape(-1)[flat_idx]
    rel = _rel_errors(a, numeric, floor)
    max_rel = float(rel.max()) if rel.size else 0.0
    return CheckReport(
        max_rel_error=max_rel,
        max_abs_error=float(np.abs(a - numeric).max()) if rel.size else 0.0,
        passed=max_rel < tolerance,
        tolerance=tolerance,
        n_checked=int(len(flat_idx)),
    )
