"""Kaiming initialization and the Adam update."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


def kaiming_init(shape, fan_in, rng, nonlinearity="relu", dtype=np.float64):
    """Draw weights from N(0, gain^2 / fan_in); gain is sqrt(2) for ReLU."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    gain = np.sqrt(2.0) if nonlinearity == "relu" else 1.0
    std = gain / np.sqrt(fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype, copy=False)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One bias-corrected Adam update, in place on ``params[name].data``.

    Weight decay is coupled: ``weight_decay * theta`` is added to the gradient
    before the moment updates. Missing gradients count as zero.
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        theta = p.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise DimensionError(f"gradient for {name}: shape {g.shape} != {theta.shape}")
        if weight_decay:
            g = g + weight_decay * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state
