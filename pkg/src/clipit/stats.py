"""Accuracy, text complementarity (omega), run aggregation, Fisher's method."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidPValue, LengthMismatch, MissingTextPredictions


def _labels(x):
    return np.asarray(x, dtype=np.int64).ravel()


def accuracy(preds, labels):
    preds, labels = _labels(preds), _labels(labels)
    if preds.shape != labels.shape:
        raise LengthMismatch(f"{preds.size} predictions for {labels.size} labels")
    if preds.size == 0:
        raise EmptyInput("no predictions")
    return int(np.count_nonzero(preds == labels)) / preds.size


@dataclass
class PredictionSet:
    labels: np.ndarray
    vision: np.ndarray
    text: np.ndarray | None = None
    fused: np.ndarray | None = None

    def __post_init__(self):
        self.labels = _labels(self.labels)
        self.vision = _labels(self.vision)
        for name in ("text", "fused"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, _labels(val))
        for name in ("vision", "text", "fused"):
            val = getattr(self, name)
            if val is not None and val.shape != self.labels.shape:
                raise LengthMismatch(f"{name} predictions: {val.size} vs {self.labels.size} labels")


def omega(p):
    """Samples the text branch gets right while the vision branch gets wrong.

    Returns ``(count, fraction)``.
    """
    if p.text is None:
        raise MissingTextPredictions("omega needs text-branch predictions")
    if p.labels.size == 0:
        raise EmptyInput("no samples")
    hit = (p.text == p.labels) & (p.vision != p.labels)
    count = int(np.count_nonzero(hit))
    return count, count / p.labels.size


def aggregate_runs(values):
    """Mean and sample (n - 1) standard deviation; std is 0 for a single run."""
    vals = [float(v) for v in values]
    if not vals:
        raise EmptyInput("no runs to aggregate")
    mean = math.fsum(vals) / len(vals)
    if len(vals) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return mean, math.sqrt(var)


def chi2_sf_even(x, dof):
    """Survival function of chi-squared with even ``dof`` (closed form)."""
    k = dof // 2
    half = x / 2.0
    term = math.exp(-half)
    total = term
    for i in range(1, k):
        term *= half / i
        total += term
    return min(1.0, total)


def fisher_combined(p_values):
    """Fisher's combined probability test. Returns ``(statistic, dof, p)``."""
    ps = [float(p) for p in p_values]
    if not ps:
        raise EmptyInput("no p-values")
    for p in ps:
        if not (0.0 < p <= 1.0) or math.isnan(p):
            raise InvalidPValue(f"p-value {p} outside (0, 1]")
    stat = -2.0 * math.fsum(math.log(p) for p in ps)
    dof = 2 * len(ps)
    return stat, dof, chi2_sf_even(stat, dof)


def mcnemar_exact(a_correct, b_correct):
    """One-sided exact McNemar p-value for "model a beats model b".

    Conditions on the discordant pairs and asks how likely at least as many
    of them favour ``a`` under a fair coin.
    """
    a = np.asarray(a_correct, dtype=bool)
    b = np.asarray(b_correct, dtype=bool)
    if a.shape != b.shape:
        raise LengthMismatch("paired correctness vectors differ in length")
    wins = int(np.count_nonzero(a & ~b))
    n = wins + int(np.count_nonzero(~a & b))
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, i) for i in range(wins, n + 1))
    return min(1.0, tail / (1 << n))
