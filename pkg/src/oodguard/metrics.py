"""Detection metrics on canonical scores (in-distribution = positive class).

A sample is accepted as in-distribution at threshold ``t`` when its score
is ``>= t``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import DataError, EmptySeries


@dataclass(frozen=True)
class ScoreSeries:
    """Per-sample canonical scores in archive order."""

    values: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise DataError("scores must be finite")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


def _pair(in_scores, ood_scores):
    a = np.asarray(getattr(in_scores, "values", in_scores), dtype=np.float64).ravel()
    b = np.asarray(getattr(ood_scores, "values", ood_scores), dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySeries("both score series must be non-empty")
    return a, b


def tnr_at_tpr95(in_scores, ood_scores):
    """Percentage of OOD scores below the largest threshold accepting >= 95% of in-distribution."""
    a, b = _pair(in_scores, ood_scores)
    k = math.ceil(round(0.95 * a.size, 9))
    t = np.sort(a)[::-1][k - 1]
    return 100.0 * np.count_nonzero(b < t) / b.size


def auroc(in_scores, ood_scores):
    """Mann-Whitney AUROC with half credit for ties."""
    a, b = _pair(in_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def detection_accuracy(in_scores, ood_scores):
    """Best balanced accuracy ``0.5 * (TPR + TNR)`` over all thresholds."""
    a, b = _pair(in_scores, ood_scores)
    candidates = np.unique(np.concatenate([a, b]))
    sa, sb = np.sort(a), np.sort(b)
    # TPR(t) = #(a >= t)/n_a ; TNR(t) = #(b < t)/n_b
    tp = a.size - np.searchsorted(sa, candidates, side="left")
    tn = np.searchsorted(sb, candidates, side="left")
    acc = 0.5 * (tp / a.size + tn / b.size)
    # threshold above every score: TPR 0, TNR 1
    return float(max(acc.max(), 0.5))


def histogram_report(in_scores, ood_scores, bins=20):
    """Counts of both populations over shared equal-width bins.

    Returns a list of ``(bin_lo, bin_hi, count_in, count_ood)`` rows. The
    last bin is closed on the right.
    """
    if bins < 2:
        raise DataError("need at least two bins")
    a = np.asarray(getattr(in_scores, "values", in_scores), dtype=np.float64).ravel()
    b = np.asarray(getattr(ood_scores, "values", ood_scores), dtype=np.float64).ravel()
    pooled = np.concatenate([a, b])
    if pooled.size == 0:
        raise EmptySeries("no scores to bin")
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)

    def counts(x):
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
        return np.bincount(idx, minlength=bins)

    ca, cb = counts(a), counts(b)
    return [(float(edges[i]), float(edges[i + 1]), int(ca[i]), int(cb[i])) for i in range(bins)]


def histogram_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_lo", "bin_hi", "count_in", "count_ood"])
    for lo, hi, ci, co in rows:
        writer.writerow([repr(lo), repr(hi), ci, co])
    return buf.getvalue()


METRICS = {
    "tnr_at_tpr95": tnr_at_tpr95,
    "auroc": auroc,
    "detection_accuracy": detection_accuracy,
}


def evaluate(in_scores, ood_scores, trials=5, seed=0):
    """Mean and standard deviation of each metric over ``trials`` evaluations.

    Trial 0 uses the series as given; trial ``i > 0`` resamples both series
    with replacement using a generator seeded with ``seed + i``.
    """
    a, b = _pair(in_scores, ood_scores)
    if trials < 1:
        raise DataError("trials must be >= 1")
    values = {name: [] for name in METRICS}
    for i in range(trials):
        if i == 0:
            ra, rb = a, b
        else:
            rng = np.random.default_rng(seed + i)
            ra = a[rng.integers(0, a.size, a.size)]
            rb = b[rng.integers(0, b.size, b.size)]
        for name, fn in METRICS.items():
            values[name].append(fn(ra, rb))
    report = {"n_in": int(a.size), "n_ood": int(b.size)}
    for name, vals in values.items():
        vals = np.array(vals)
        report[name] = {"mean": float(vals.mean()), "sd": float(vals.std())}
    return report


def report_json(report, method=""):
    return json.dumps({"method": method, **report}, indent=2, sort_keys=False) + "\n"
