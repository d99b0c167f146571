"""Per-sample confidence and the high/medium/low batch partition.

A sample's confidence is the predicted probability of its true class. Within
each grade, a batch is ranked by confidence and cut into H/M/L subsets in the
proportion of an integer ratio (for example 7:2:1).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, LabelError, NumericError

GRADES = ("KL0", "KL2")
SUBSETS = ("H", "M", "L")


def grade_index(label):
    """Map ``"KL0"``/``"KL2"`` (or KL integers 0/2) to class index 0/1."""
    if isinstance(label, str):
        key = label.strip().upper().replace("-", "")
        if key in GRADES:
            return GRADES.index(key)
    elif isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        if int(label) == 0:
            return 0
        if int(label) == 2:
            return 1
    raise LabelError(f"grade {label!r} is not one of {GRADES}")


@dataclass(frozen=True)
class ConfidenceScore:
    sample_id: str
    grade: str
    confidence: float
    index: int = -1  # position in the batch


@dataclass(frozen=True)
class PartitionSpec:
    high: int = 7
    medium: int = 2
    low: int = 1

    def __post_init__(self):
        parts = (self.high, self.medium, self.low)
        if any(int(p) != p or p < 0 for p in parts):
            raise ConfigError(f"partition ratio parts must be non-negative integers, got {parts}")
        if sum(parts) <= 0:
            raise ConfigError("partition ratio must have a positive sum")
        if not (self.high >= self.medium >= self.low):
            raise ConfigError(f"partition ratio must satisfy high >= medium >= low, got {parts}")

    @classmethod
    def parse(cls, text):
        """Parse ``"7:2:1"``."""
        try:
            parts = [int(p) for p in str(text).split(":")]
        except ValueError as exc:
            raise ConfigError(f"bad partition ratio {text!r}") from exc
        if len(parts) != 3:
            raise ConfigError(f"partition ratio needs three parts, got {text!r}")
        return cls(*parts)

    @property
    def parts(self):
        return (self.high, self.medium, self.low)

    def __str__(self):
        return f"{self.high}:{self.medium}:{self.low}"


def largest_remainder(n, parts):
    """Split ``n`` items in proportion to ``parts``.

    Floors of the exact quotas are handed out first; leftover items go to the
    largest fractional remainders, ties to the earlier part. Integer
    arithmetic throughout, so ties are exact.
    """
    total = sum(parts)
    floors = [(n * p) // total for p in parts]
    rems = [(n * p) % total for p in parts]
    left = n - sum(floors)
    order = sorted(range(len(parts)), key=lambda i: (-rems[i], i))
    for i in order[:left]:
        floors[i] += 1
    return floors


@dataclass
class GradePartition:
    high: list = field(default_factory=list)
    medium: list = field(default_factory=list)
    low: list = field(default_factory=list)

    def subset(self, name):
        return {"H": self.high, "M": self.medium, "L": self.low}[name]


@dataclass
class PartitionResult:
    grades: dict  # grade -> GradePartition

    def indices(self, subset):
        """Batch positions in ``subset`` ("H", "M" or "L") across grades, ascending."""
        return sorted(s.index for g in self.grades.values() for s in g.subset(subset))

    def sizes(self):
        return {k: len(self.indices(k)) for k in SUBSETS}

    def assignment(self):
        """Map batch position -> subset name."""
        out = {}
        for g in self.grades.values():
            for name in SUBSETS:
                for s in g.subset(name):
                    out[s.index] = name
        return out


def sample_confidence(probabilities, true_labels, sample_ids=None):
    """Confidence of each sample: its probability for the true class (detached)."""
    raw = np.asarray(getattr(probabilities, "data", probabilities))
    tol = 1e-5 if raw.dtype == np.float32 else 1e-9
    probs = raw.astype(np.float64)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise DataError(f"expected [N, 2] probabilities, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite probabilities")
    if probs.shape[0] and np.max(np.abs(probs.sum(axis=1) - 1.0)) > tol:
        raise DataError("probability rows must sum to 1")
    if len(true_labels) != probs.shape[0]:
        raise DataError(f"{len(true_labels)} labels for {probs.shape[0]} rows")
    if sample_ids is None:
        sample_ids = [f"{i:06d}" for i in range(len(true_labels))]
    out = []
    for i, (label, sid) in enumerate(zip(true_labels, sample_ids)):
        k = grade_index(label)
        out.append(ConfidenceScore(str(sid), GRADES[k], float(probs[i, k]), i))
    return out


def partition_batch(scores, spec: PartitionSpec):
    """Rank each grade by confidence (descending, ties by sample_id) and cut per ``spec``."""
    result = {}
    for grade in GRADES:
        members = sorted(
            (s for s in scores if s.grade == grade),
            key=lambda s: (-s.confidence, s.sample_id),
        )
        n_h, n_m, _ = largest_remainder(len(members), spec.parts)
        result[grade] = GradePartition(
            high=members[:n_h], medium=members[n_h:n_h + n_m], low=members[n_h + n_m:]
        )
    return PartitionResult(result)


def grade_average_confidence(validation_scores):
    """Mean validation confidence per grade."""
    sums = {g: 0.0 for g in GRADES}
    counts = {g: 0 for g in GRADES}
    for s in validation_scores:
        sums[s.grade] += s.confidence
        counts[s.grade] += 1
    empty = [g for g in GRADES if counts[g] == 0]
    if empty:
        raise DataError(f"no validation samples for grade(s) {empty}; KLD targets undefined")
    return {g: sums[g] / counts[g] for g in GRADES}


def check_partition(scores, result, spec):
    """Assert the cover, ordering and size invariants; raise AssertionError on violation."""
    for grade in GRADES:
        members = [s for s in scores if s.grade == grade]
        gp = result.grades[grade]
        parts = [gp.high, gp.medium, gp.low]
        got = sorted(s.index for p in parts for s in p)
        assert got == sorted(s.index for s in members), f"{grade}: partition is not a disjoint cover"
        for upper, lower in ((gp.high, gp.medium), (gp.medium, gp.low), (gp.high, gp.low)):
            if upper and lower:
                assert min(s.confidence for s in upper) >= max(s.confidence for s in lower), (
                    f"{grade}: confidence ordering violated"
                )
        total = sum(spec.parts)
        for p, part in zip(parts, spec.parts):
            assert abs(len(p) - len(members) * part / total) < 1, f"{grade}: size off quota"
