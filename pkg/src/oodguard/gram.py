"""Higher-order Gram matrix OOD detector.

For every layer and order ``p`` the detector records, per predicted class,
the element-wise minimum and maximum of the order-``p`` Gram matrix over
in-distribution samples. A test sample's deviation from those bounds is
summed per layer, normalized by the expected layer deviation on held-out
in-distribution data, and summed over layers into a total deviation.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._utils import check_layers, nearest_rank
from .archive import ActivationArchive, predicted_classes
from .exceptions import DataError, EmptyPredictedClass
from .npy import load_npy, save_npy

# samples per batch when materializing Gram matrices
CHUNK = 64


def _as_feature_maps(arr):
    """``[N, C, ...spatial]`` -> ``[N, C, S]`` (``S = 1`` for dense layers)."""
    arr = np.asarray(arr, dtype=np.float64)
    return arr.reshape(arr.shape[0], arr.shape[1], -1)


def _chunks(n, size=CHUNK):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def signed_root(x, p):
    return np.sign(x) * np.abs(x) ** (1.0 / p)


def gram_matrix(feature_map, order):
    """Upper triangle (row-major, with diagonal) of the order-``p`` Gram matrix.

    ``feature_map`` is ``[C, S]``. Elements are raised to the ``p``-th power,
    multiplied by the transpose, and brought back with a sign-preserving
    ``p``-th root.
    """
    f = np.asarray(feature_map, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    return batch_gram(f[None], order)[0]


def batch_gram(maps, order):
    """``gram_matrix`` for each ``[C, S]`` map in a ``[N, C, S]`` stack."""
    if order < 1:
        raise DataError(f"Gram order must be >= 1, got {order}")
    fp = maps**order
    g = signed_root(np.einsum("ncs,nds->ncd", fp, fp), order)
    iu = np.triu_indices(maps.shape[1])
    return g[:, iu[0], iu[1]]


def deviation(value, lo, hi, epsilon_div=1e-12):
    """Relative distance of ``value`` outside ``[lo, hi]`` (0 inside)."""
    value = np.asarray(value, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        below = np.where(value < lo, (lo - value) / (np.abs(lo) + epsilon_div), 0.0)
        above = np.where(value > hi, (value - hi) / (np.abs(hi) + epsilon_div), 0.0)
    out = below + above
    # bounds of a class never predicted during fitting: every element deviates by 1
    out = np.where(np.isfinite(lo) & np.isfinite(hi), out, 1.0)
    return float(out) if out.ndim == 0 else out


class GramDetector(BaseEstimator):
    """Class-conditional Gram-matrix bounds detector.

    Parameters
    ----------
    orders : sequence of int, default=(1, 2, 3, 4, 5)
    holdout_fraction : float, default=0.2
        Share of the fitting archive kept aside to estimate the expected
        layer deviations and the threshold.
    epsilon_div : float, default=1e-12
        Guard added to bound magnitudes in the deviation denominator, and
        floor for the expected layer deviations.
    percentile : float, default=95.0
    random_state : int, default=0
        Seeds the bounds/normalization split.
    """

    method = "gram"

    def __init__(self, orders=(1, 2, 3, 4, 5), holdout_fraction=0.2, epsilon_div=1e-12,
                 percentile=95.0, random_state=0):
        self.orders = orders
        self.holdout_fraction = holdout_fraction
        self.epsilon_div = epsilon_div
        self.percentile = percentile
        self.random_state = random_state

    def _grams(self, arr):
        maps = _as_feature_maps(arr)
        return np.stack([batch_gram(maps, p) for p in self.orders_], axis=1)  # [N, P, T]

    def fit(self, X, y=None):
        """Fit bounds, expected deviations and threshold on archive ``X``.

        Classes come from the archive's logits (predicted, not true labels).
        """
        if not isinstance(X, ActivationArchive):
            raise DataError("GramDetector.fit expects an ActivationArchive")
        if not 0 < self.holdout_fraction <= 0.5:
            raise DataError("holdout_fraction must lie in (0, 0.5]")
        orders = [int(p) for p in self.orders]
        if not orders or min(orders) < 1:
            raise DataError("orders must be positive integers")
        if not X.layers:
            raise DataError("archive has no activation layers")
        n = X.n_samples
        n_norm = max(1, int(round(self.holdout_fraction * n)))
        if n - n_norm < 1:
            raise EmptyPredictedClass("too few samples to form a bounds partition")
        self.orders_ = orders
        self.layer_names_ = X.layer_names
        self.n_classes_ = X.n_classes

        perm = np.random.default_rng(self.random_state).permutation(n)
        norm_idx, bound_idx = np.sort(perm[:n_norm]), np.sort(perm[n_norm:])
        preds = predicted_classes(X)
        bound_preds = preds[bound_idx]

        self.mins_, self.maxs_ = [], []
        for _, arr in X.layers:
            c_dim = arr.shape[1]
            shape = (self.n_classes_, len(orders), c_dim * (c_dim + 1) // 2)
            lo = np.full(shape, np.inf)
            hi = np.full(shape, -np.inf)
            for chunk in _chunks(len(bound_idx)):
                g = self._grams(arr[bound_idx[chunk]])
                chunk_preds = bound_preds[chunk]
                for c in np.unique(chunk_preds):
                    members = g[chunk_preds == c]
                    np.minimum(lo[c], members.min(axis=0), out=lo[c])
                    np.maximum(hi[c], members.max(axis=0), out=hi[c])
            self.mins_.append(lo)
            self.maxs_.append(hi)
        self.empty_classes_ = [
            c for c in range(self.n_classes_) if not np.any(bound_preds == c)
        ]

        self.expected_deviation_ = np.ones(len(self.layer_names_))
        raw = self.layer_deviations(X.subset(norm_idx))
        self.expected_deviation_ = np.maximum(raw.mean(axis=0), self.epsilon_div)
        self.norm_total_deviation_ = raw @ (1.0 / self.expected_deviation_)
        self.threshold_ = nearest_rank(self.norm_total_deviation_, self.percentile)
        self.normalization_index_ = norm_idx
        self.bounds_index_ = bound_idx
        return self

    def layer_deviations(self, X):
        """``[N, L]`` unnormalized per-layer deviations."""
        check_is_fitted(self, "mins_")
        check_layers(self.layer_names_, X)
        preds = predicted_classes(X)
        cols = []
        for (_, arr), lo, hi in zip(X.layers, self.mins_, self.maxs_):
            col = np.zeros(X.n_samples)
            for chunk in _chunks(X.n_samples):
                p = preds[chunk]
                dev = deviation(self._grams(arr[chunk]), lo[p], hi[p], self.epsilon_div)
                col[chunk] = dev.sum(axis=(1, 2))
            cols.append(col)
        return np.column_stack(cols)

    def total_deviation(self, X):
        return self.layer_deviations(X) @ (1.0 / self.expected_deviation_)

    def score_samples(self, X):
        """Negated total deviation; higher means more in-distribution."""
        return -self.total_deviation(X)

    def is_ood(self, total_deviation):
        check_is_fitted(self, "threshold_")
        return np.asarray(total_deviation) > self.threshold_

    def predict(self, X):
        return np.where(self.is_ood(self.total_deviation(X)), -1, 1)

    def save(self, directory):
        check_is_fitted(self, "mins_")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for l, (lo, hi) in enumerate(zip(self.mins_, self.maxs_)):
            for c in range(self.n_classes_):
                for i, p in enumerate(self.orders_):
                    save_npy(directory / f"mins_c{c}_l{l}_p{p}.npy", lo[c, i])
                    save_npy(directory / f"maxs_c{c}_l{l}_p{p}.npy", hi[c, i])
        manifest = {
            "method": self.method,
            "orders": self.orders_,
            "holdout_fraction": float(self.holdout_fraction),
            "epsilon_div": float(self.epsilon_div),
            "percentile": float(self.percentile),
            "random_state": self.random_state,
            "threshold": self.threshold_,
            "expected_layer_deviation": [float(v) for v in self.expected_deviation_],
            "layers": self.layer_names_,
            "n_classes": int(self.n_classes_),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory, manifest=None):
        directory = Path(directory)
        if manifest is None:
            manifest = json.loads((directory / "manifest.json").read_text())
        det = cls(
            orders=tuple(manifest["orders"]),
            holdout_fraction=manifest["holdout_fraction"],
            epsilon_div=manifest["epsilon_div"],
            percentile=manifest["percentile"],
            random_state=manifest["random_state"],
        )
        det.orders_ = list(manifest["orders"])
        det.layer_names_ = list(manifest["layers"])
        det.n_classes_ = int(manifest["n_classes"])
        det.threshold_ = float(manifest["threshold"])
        det.expected_deviation_ = np.array(manifest["expected_layer_deviation"], dtype=np.float64)
        det.mins_, det.maxs_ = [], []
        for l in range(len(det.layer_names_)):
            for name, store in (("mins", det.mins_), ("maxs", det.maxs_)):
                store.append(np.stack([
                    np.stack([load_npy(directory / f"{name}_c{c}_l{l}_p{p}.npy") for p in det.orders_])
                    for c in range(det.n_classes_)
                ]))
        return det

