"""Piecewise min-max mapping of canonical scores onto a 0-100 confidence.

Scores at or above the in-distribution threshold ``tau`` (the 5th
percentile of calibration scores) map linearly onto [90, 100]; scores
below it continue the same denominator down towards 0 and are clipped.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._utils import nearest_rank
from .exceptions import DataError, DegenerateCalibration, EmptyScores

MIN_DENOMINATOR = 1e-12
MIN_SAMPLES = 20


@dataclass(frozen=True)
class CalibrationMap:
    tau: float
    s_max: float
    denominator: float

    def __post_init__(self):
        if not (self.s_max >= self.tau and self.denominator > 0):
            raise DataError("calibration map needs s_max >= tau and a positive denominator")

    def to_json(self):
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(float(d["tau"]), float(d["s_max"]), float(d["denominator"]))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())


def fit_calibration(in_scores, percentile=5.0):
    """Fit ``tau`` (nearest-rank percentile) and ``s_max`` on in-distribution scores."""
    scores = np.asarray(in_scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise EmptyScores("cannot calibrate on zero scores")
    if not np.all(np.isfinite(scores)):
        raise DataError("calibration scores must be finite")
    if scores.size < MIN_SAMPLES:
        warnings.warn(
            f"calibrating on {scores.size} scores (< {MIN_SAMPLES})", DegenerateCalibration, stacklevel=2
        )
    tau = nearest_rank(scores, percentile)
    s_max = float(scores.max())
    return CalibrationMap(tau, s_max, max(s_max - tau, MIN_DENOMINATOR))


def confidence(cmap, scores):
    """Confidence in [0, 100] for one canonical score or an array of them."""
    s = np.asarray(scores, dtype=np.float64)
    rel = (s - cmap.tau) / cmap.denominator
    out = np.where(s >= cmap.tau, np.minimum(90.0 + 10.0 * rel, 100.0), np.maximum(90.0 + 90.0 * rel, 0.0))
    return float(out) if out.ndim == 0 else out


class ConfidenceCalibrator(TransformerMixin, BaseEstimator):
    """sklearn transformer wrapping ``fit_calibration`` and ``confidence``."""

    def __init__(self, percentile=5.0):
        self.percentile = percentile

    def fit(self, X, y=None):
        self.map_ = fit_calibration(X, self.percentile)
        return self

    def transform(self, X):
        check_is_fitted(self, "map_")
        return confidence(self.map_, X)
