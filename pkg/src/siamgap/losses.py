"""Subset losses (label-smoothed CE, KL-style target matching, plain CE) and their mix.

All three are mean-reduced over their subset and use natural logs with
probabilities clamped to ``[1e-12, 1]``. An empty subset contributes 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import ndkernel as nk
from .confidence import GRADES, PartitionSpec
from .errors import ConfigError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
_warned = set()


def _warn_once(key, msg):
    if key not in _warned:
        _warned.add(key)
        log.warning(msg)


@dataclass
class HybridConfig:
    epsilon: float = 0.15
    alpha: float = 0.4
    beta: float = 0.5
    gamma: float = 0.1
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    targets: dict | None = None  # grade -> c_k, refreshed by the trainer
    strict_onehot: bool = False  # zero out misclassified medium samples

    def validate(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must be in (0, 1), got {self.epsilon}")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        total = self.alpha + self.beta + self.gamma
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(
                f"loss weights must satisfy alpha + beta + gamma = 1, got {total:.12g}"
            )
        return self


@dataclass
class HybridLossReport:
    j_lsce: float
    j_kld: float
    j_ce: float
    j_hybrid: float
    sizes: dict
    total: nk.Tensor | None = None  # differentiable J_hybrid


def label_smooth(y_hot, epsilon):
    """``y_hot * (1 - eps) + eps / 2`` for two classes."""
    if not 0.0 < epsilon < 1.0:
        raise ConfigError(f"epsilon must be in (0, 1), got {epsilon}")
    return np.asarray(y_hot, dtype=np.float64) * (1.0 - epsilon) + epsilon / 2.0


def _zero(like=None):
    return nk.Tensor._wrap(np.asarray(0.0, dtype=getattr(like, "dtype", np.float64)))


def _clamped_log(p, hi=1.0):
    if np.any(p.data < PROB_FLOOR) or (hi < 1.0 and np.any(p.data > hi)):
        _warn_once("clamp", f"probabilities clamped to [{PROB_FLOOR}, {hi}] before log")
    return nk.log(nk.clip(p, PROB_FLOOR, hi))


def lsce_loss(probs, labels, epsilon):
    """Label-smoothing cross-entropy, mean over rows of ``probs`` [n, 2]."""
    probs = nk.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.intp)
    if probs.shape[0] == 0:
        return _zero(probs)
    y = label_smooth(np.eye(2)[labels], epsilon).astype(probs.dtype)
    per_class = nk.mul(_clamped_log(probs), y)
    return nk.mul(nk.mean(nk.tsum(per_class, axis=1)), -1.0)


def ce_loss(probs, labels):
    """Cross-entropy ``-log c_s``, mean over rows."""
    probs = nk.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.intp)
    if probs.shape[0] == 0:
        return _zero(probs)
    c_s = nk.gather(probs, labels)
    return nk.mul(nk.mean(_clamped_log(c_s)), -1.0)


def kld_loss(probs, labels, targets, strict_onehot=False):
    """Target-confidence divergence over rows of ``probs``.

    ``targets`` holds c_k for each row's grade. A correctly predicted row
    (argmax, ties to class 0) contributes ``log(c_k / c_s)``; a misclassified
    one ``log((1 - c_k) / (1 - c_s))``, or 0 with ``strict_onehot``.
    Terms may be negative.
    """
    probs = nk.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.intp)
    n = probs.shape[0]
    if n == 0:
        return _zero(probs)
    c_k = np.asarray(targets, dtype=np.float64).reshape(n)
    if np.any((c_k <= 0.0) | (c_k >= 1.0)):
        _warn_once("ck", "grade target confidence at 0 or 1; clamping")
        c_k = np.clip(c_k, PROB_FLOOR, 1.0 - PROB_FLOOR)
    correct = probs.data.argmax(axis=1) == labels
    c_s = nk.clip(nk.gather(probs, labels), PROB_FLOOR, 1.0 - PROB_FLOOR)
    sign = np.where(correct, 1.0, -1.0).astype(probs.dtype)
    offset = np.where(correct, 0.0, 1.0).astype(probs.dtype)
    p_s = nk.add(nk.mul(c_s, sign), offset)  # c_s or 1 - c_s
    p_target = np.where(correct, c_k, 1.0 - c_k).astype(probs.dtype)
    terms = nk.sub(np.log(p_target), nk.log(p_s))
    if strict_onehot:
        terms = nk.mul(terms, correct.astype(probs.dtype))
    return nk.mean(terms)


def hybrid(j_lsce, j_kld, j_ce, config: HybridConfig, sizes=None):
    """Weighted sum ``alpha*J_LSCE + beta*J_KLD + gamma*J_CE``."""
    config.validate()
    terms = [t if t is not None else _zero() for t in (j_lsce, j_kld, j_ce)]
    terms = [nk.as_tensor(t) for t in terms]
    total = nk.add(
        nk.add(nk.mul(terms[0], config.alpha), nk.mul(terms[1], config.beta)),
        nk.mul(terms[2], config.gamma),
    )
    return HybridLossReport(
        j_lsce=float(terms[0].data),
        j_kld=float(terms[1].data),
        j_ce=float(terms[2].data),
        j_hybrid=float(total.data),
        sizes=dict(sizes or {}),
        total=total,
    )


def hybrid_objective(probs, labels, partition, config: HybridConfig, targets=None):
    """Route a batch's rows through the three losses per ``partition``.

    ``targets`` maps grade -> c_k (defaults to ``config.targets``). Rows keep
    their batch order inside each subset.
    """
    targets = targets if targets is not None else config.targets
    labels = np.asarray(labels, dtype=np.intp)
    idx = {k: np.asarray(partition.indices(k), dtype=np.intp) for k in ("H", "M", "L")}
    j_lsce = j_kld = j_ce = None
    if idx["H"].size:
        j_lsce = lsce_loss(nk.take_rows(probs, idx["H"]), labels[idx["H"]], config.epsilon)
    if idx["M"].size:
        if targets is None:
            raise ConfigError("medium-confidence subset is non-empty but no grade targets c_k are set")
        c_k = np.array([targets[GRADES[k]] for k in labels[idx["M"]]])
        j_kld = kld_loss(
            nk.take_rows(probs, idx["M"]), labels[idx["M"]], c_k, config.strict_onehot
        )
    if idx["L"].size:
        j_ce = ce_loss(nk.take_rows(probs, idx["L"]), labels[idx["L"]])
    sizes = {k: int(v.size) for k, v in idx.items()}
    return hybrid(j_lsce, j_kld, j_ce, config, sizes)
