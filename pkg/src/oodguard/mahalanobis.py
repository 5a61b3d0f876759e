"""Mahalanobis-distance OOD detector.

Each layer's features are modelled as class-conditional Gaussians with a
shared (tied) covariance. A sample's layer score is the negative squared
Mahalanobis distance to the closest class mean, and layer scores are
combined by a logistic-regression weighting.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._utils import check_layers
from .archive import ActivationArchive, spatial_mean
from .exceptions import (
    DataError,
    DimensionMismatch,
    EmptyClass,
    LayerMismatch,
    MissingLabels,
    SingularCovariance,
)
from .npy import load_npy, save_npy

NOISE_GRID = (0.0, 0.0005, 0.001, 0.0014, 0.002, 0.0024, 0.005, 0.01)


@dataclass(frozen=True)
class LayerGaussians:
    means: np.ndarray  # [K, C]
    precision: np.ndarray  # [C, C]
    layer_index: int = 0
    ridge: float = 0.0

    @property
    def n_features(self):
        return self.means.shape[1]


def _regularized_precision(cov, ridge, retries=3):
    eye = np.eye(cov.shape[0])
    lam = ridge
    for _ in range(retries + 1):
        try:
            factor = cho_factor(cov + lam * eye, lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            lam *= 10.0
            continue
        precision = cho_solve(factor, eye)
        return 0.5 * (precision + precision.T), lam
    raise SingularCovariance(f"covariance not positive definite even with ridge {lam / 10.0:g}")


def fit_gaussians(train, ridge=None, labels=None):
    """Per-layer class means and tied precision matrices.

    ``ridge`` is added to the covariance diagonal before inversion; by
    default it is ``1e-6 * trace(cov) / C`` for each layer. A failed
    Cholesky factorization retries with the ridge scaled by 10, up to
    three times.
    """
    labels = train.labels if labels is None else np.asarray(labels, dtype=np.int64)
    if labels is None:
        raise MissingLabels("Mahalanobis fitting needs labelled training data")
    if ridge is not None and not ridge > 0:
        raise DataError(f"ridge must be positive, got {ridge}")
    k = train.n_classes
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyClass(f"classes {empty.tolist()} have no training samples")
    if np.any(counts < 2):
        raise EmptyClass(f"every class needs at least 2 samples, got counts {counts.tolist()}")

    gaussians = []
    for index, (_, arr) in enumerate(train.layers):
        feats = spatial_mean(arr).astype(np.float64)
        means = np.stack([feats[labels == c].mean(axis=0) for c in range(k)])
        centered = feats - means[labels]
        cov = centered.T @ centered / feats.shape[0]
        lam = ridge
        if lam is None:
            lam = 1e-6 * np.trace(cov) / cov.shape[0]
            if not lam > 0:
                lam = 1e-6
        precision, lam = _regularized_precision(cov, float(lam))
        gaussians.append(LayerGaussians(means, precision, index, float(lam)))
    return gaussians


def _quadratic_forms(gaussians, feats):
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if feats.shape[1] != gaussians.n_features:
        raise DimensionMismatch(f"feature dimension {feats.shape[1]} != {gaussians.n_features}")
    diff = feats[:, None, :] - gaussians.means[None, :, :]
    return np.einsum("nkc,cd,nkd->nk", diff, gaussians.precision, diff)


def layer_score(gaussians, feature):
    """max over classes of -(f - mu_c)^T P (f - mu_c); vector or ``[N, C]``."""
    feature = np.asarray(feature, dtype=np.float64)
    scores = -_quadratic_forms(gaussians, feature).min(axis=1)
    return float(scores[0]) if feature.ndim == 1 else scores


def _score_gradient(gaussians):
    """d layer_score / d feature, with the closest class held fixed."""

    def grad(h):
        closest = _quadratic_forms(gaussians, h).argmin(axis=1)
        return -2.0 * (h - gaussians.means[closest]) @ gaussians.precision

    return grad


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_combiner(X, y, epochs=500, lr=0.01):
    """Full-batch gradient-descent logistic regression on standardized columns.

    Returns ``(weights, bias)`` expressed on the raw (unstandardized) scale.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[~(sd > 1e-12)] = 1.0
    Z = (X - mean) / sd
    w = np.zeros(X.shape[1])
    b = 0.0
    n = X.shape[0]
    for _ in range(epochs):
        err = _sigmoid(Z @ w + b) - y
        w -= lr * (Z.T @ err) / n
        b -= lr * err.sum() / n
    alpha = w / sd
    return alpha, float(b - np.dot(alpha, mean))


def fit_layer_weights(in_dist, adversarial, model, net=None):
    """Logistic weights separating in-distribution (1) from adversarial (0) layer scores."""
    if in_dist.layer_names != adversarial.layer_names:
        raise LayerMismatch("in-distribution and adversarial archives have different layers")
    pos = model.layer_scores(in_dist, net)
    neg = model.layer_scores(adversarial, net)
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return logistic_combiner(X, y)


class MahalanobisDetector(BaseEstimator):
    """Layer-ensemble Mahalanobis detector.

    Parameters
    ----------
    ridge : float or None, default=None
        Absolute covariance ridge; ``None`` picks ``1e-6 * trace / C`` per layer.
    noise_magnitude : float, default=0.0
        Input perturbation step. Only applied when scoring through a
        ``MicroNet`` (activation archives cannot be perturbed).

    Attributes
    ----------
    gaussians_ : list of LayerGaussians
    layer_weights_ : ndarray of shape (n_layers,)
    bias_ : float
    """

    method = "mahalanobis"

    def __init__(self, ridge=None, noise_magnitude=0.0):
        self.ridge = ridge
        self.noise_magnitude = noise_magnitude

    def fit(self, X, y=None, adversarial=None, net=None):
        """Fit class Gaussians on archive ``X``.

        If ``adversarial`` is given, the layer weights are fitted by
        logistic regression (``X`` positive, ``adversarial`` negative);
        otherwise every layer gets weight ``1/L`` and the bias is 0. ``net``
        enables perturbed scores while fitting the weights.
        """
        if not isinstance(X, ActivationArchive):
            raise DataError("MahalanobisDetector.fit expects an ActivationArchive")
        if not (np.isfinite(self.noise_magnitude) and self.noise_magnitude >= 0):
            raise DataError("noise_magnitude must be finite and >= 0")
        if not X.layers:
            raise DataError("archive has no activation layers")
        self.gaussians_ = fit_gaussians(X, self.ridge, labels=y)
        self.layer_names_ = X.layer_names
        n_layers = len(self.gaussians_)
        self.layer_weights_ = np.full(n_layers, 1.0 / n_layers)
        self.bias_ = 0.0
        if adversarial is not None:
            self.layer_weights_, self.bias_ = fit_layer_weights(X, adversarial, self, net)
        return self

    def layer_scores(self, X, net=None):
        """``[N, L]`` per-layer scores, perturbed through ``net`` when noise is on."""
        check_is_fitted(self, "gaussians_")
        check_layers(self.layer_names_, X)
        if self.noise_magnitude > 0 and net is not None:
            return self._perturbed_layer_scores(X, net)
        cols = [
            layer_score(g, spatial_mean(arr)).reshape(-1)
            for g, (_, arr) in zip(self.gaussians_, X.layers)
        ]
        return np.column_stack(cols) if cols else np.empty((X.n_samples, 0))

    def _perturbed_layer_scores(self, X, net):
        from .micronet import LayerFunctional, forward, input_gradient

        if X.raw_inputs is None:
            raise DataError("input perturbation needs raw inputs in the archive")
        if net.n_hidden != len(self.gaussians_):
            raise LayerMismatch("net hidden layers do not match fitted layers")
        x = X.raw_inputs
        cols = []
        for i, g in enumerate(self.gaussians_):
            grad = input_gradient(net, x, LayerFunctional(i, _score_gradient(g)))
            _, hidden = forward(net, x + self.noise_magnitude * np.sign(grad))
            cols.append(layer_score(g, hidden[i]).reshape(-1))
        return np.column_stack(cols)

    def score_samples(self, X, net=None):
        """Weighted layer-score sum; higher means more in-distribution."""
        return self.layer_scores(X, net) @ self.layer_weights_ + self.bias_

    def save(self, directory):
        check_is_fitted(self, "gaussians_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, g in enumerate(self.gaussians_):
            save_npy(directory / f"mu_{i}.npy", g.means)
            save_npy(directory / f"precision_{i}.npy", g.precision)
        manifest = {
            "method": self.method,
            "ridge": self.ridge,
            "noise_magnitude": float(self.noise_magnitude),
            "layers": self.layer_names_,
            "layer_ridges": [g.ridge for g in self.gaussians_],
            "weights": [float(w) for w in self.layer_weights_],
            "bias": float(self.bias_),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory, manifest=None):
        directory = Path(directory)
        if manifest is None:
            manifest = json.loads((directory / "manifest.json").read_text())
        det = cls(ridge=manifest["ridge"], noise_magnitude=manifest["noise_magnitude"])
        det.layer_names_ = list(manifest["layers"])
        det.gaussians_ = [
            LayerGaussians(
                load_npy(directory / f"mu_{i}.npy"),
                load_npy(directory / f"precision_{i}.npy"),
                i,
                float(manifest["layer_ridges"][i]),
            )
            for i in range(len(det.layer_names_))
        ]
        det.layer_weights_ = np.array(manifest["weights"], dtype=np.float64)
        det.bias_ = float(manifest["bias"])
        return det


def search_noise_magnitude(net, X, y, grid=NOISE_GRID, adversarial_epsilon=0.1, ridge=None):
    """Pick the perturbation magnitude that best separates ``X`` from FGSM copies of it.

    For every candidate magnitude a detector is fitted with the combiner
    trained on in-distribution vs FGSM samples, and the candidate with the
    highest AUROC on those pairs wins (ties go to the smaller magnitude).

    Returns:
        ``(best_magnitude, {magnitude: auroc})``
    """
    from .metrics import auroc
    from .micronet import fgsm, to_archive

    y = np.asarray(y, dtype=np.int64)
    train = to_archive(net, X, y)
    adv = to_archive(net, fgsm(net, X, y, adversarial_epsilon), y)
    results = {}
    for eps in grid:
        det = MahalanobisDetector(ridge=ridge, noise_magnitude=eps).fit(train)
        pos = det.layer_scores(train, net)
        neg = det.layer_scores(adv, net)
        alpha, bias = logistic_combiner(
            np.vstack([pos, neg]), np.r_[np.ones(len(pos)), np.zeros(len(neg))]
        )
        results[float(eps)] = auroc(pos @ alpha + bias, neg @ alpha + bias)
    best = max(results, key=lambda e: (results[e], -e))
    return best, results
