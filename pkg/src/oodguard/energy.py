"""Energy score detector on classifier logits.

The energy of a logit vector ``f`` at temperature ``T`` is
``-T * log(sum_i exp(f_i / T))``. In-distribution inputs tend to have low
energy; the OOD threshold is the 95th percentile (nearest rank) of the
energies of an in-distribution fitting set.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._utils import nearest_rank
from .archive import ActivationArchive
from .exceptions import DataError, EmptyArchive, NonFiniteLogit


def logsumexp(a, axis=-1):
    """Shifted log-sum-exp; exact for finite inputs of any magnitude."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def energy(logits, temperature=1.0):
    """Energy of one logit vector (``[K]``) or of each row of ``[N, K]``."""
    if not (np.isfinite(temperature) and temperature > 0):
        raise DataError(f"temperature must be finite and positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 0 or logits.shape[-1] < 1:
        raise DataError("energy needs at least one logit")
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLogit("logits contain NaN or infinity")
    if logits.shape[0] == 0 and logits.ndim == 2:
        return np.empty(0)
    result = -temperature * logsumexp(logits / temperature, axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def _logits(data):
    if isinstance(data, ActivationArchive):
        return data.logits
    return np.atleast_2d(np.asarray(data, dtype=np.float64))


class EnergyDetector(BaseEstimator):
    """Energy-based OOD detector with a 95th-percentile in-distribution threshold.

    Parameters
    ----------
    temperature : float, default=1.0
    percentile : float, default=95.0
        Nearest-rank percentile of in-distribution energies used as the
        threshold. Samples with energy strictly above it are OOD.
    """

    method = "energy"

    def __init__(self, temperature=1.0, percentile=95.0):
        self.temperature = temperature
        self.percentile = percentile

    def fit(self, X, y=None):
        """Fit the threshold on an in-distribution archive (or ``[N, K]`` logits)."""
        logits = _logits(X)
        if logits.shape[0] == 0:
            raise EmptyArchive("cannot fit an energy threshold on zero samples")
        energies = energy(logits, self.temperature)
        self.threshold_ = nearest_rank(energies, self.percentile)
        self.n_classes_ = logits.shape[1]
        return self

    def energy(self, X):
        return energy(_logits(X), self.temperature)

    def score_samples(self, X):
        """Canonical scores (negated energy; higher means more in-distribution)."""
        return -self.energy(X)

    def is_ood(self, energies):
        check_is_fitted(self, "threshold_")
        return np.asarray(energies) > self.threshold_

    def predict(self, X):
        """1 for in-distribution, -1 for OOD (sklearn outlier convention)."""
        return np.where(self.is_ood(self.energy(X)), -1, 1)

    def save(self, directory):
        check_is_fitted(self, "threshold_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "method": self.method,
            "temperature": float(self.temperature),
            "percentile": float(self.percentile),
            "threshold": self.threshold_,
            "n_classes": int(self.n_classes_),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory, manifest=None):
        if manifest is None:
            manifest = json.loads((Path(directory) / "manifest.json").read_text())
        det = cls(temperature=manifest["temperature"], percentile=manifest.get("percentile", 95.0))
        det.threshold_ = float(manifest["threshold"])
        det.n_classes_ = int(manifest["n_classes"])
        return det
