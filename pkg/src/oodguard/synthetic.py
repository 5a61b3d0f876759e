"""Gaussian-blob tasks with near- and far-OOD sets for end-to-end checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError
from .micronet import to_archive


@dataclass(frozen=True)
class SyntheticTask:
    """``K`` isotropic Gaussian blobs plus one OOD generator.

    ``ood`` is ``"far"`` (a cluster ``far_distance * sigma`` beyond the
    outermost blob) or ``"near"`` (noise around midpoints of random pairs
    of blob centers).
    """

    centers: np.ndarray
    sigma: float = 1.0
    ood: str = "far"
    far_distance: float = 20.0
    seed: int = 0

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if not self.sigma > 0:
            raise DataError("sigma must be positive")
        if self.ood not in ("far", "near"):
            raise DataError(f"unknown OOD kind {self.ood!r}")
        if len(centers) < 2:
            raise DataError("need at least two centers")
        gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if np.any(gaps[np.triu_indices(len(centers), 1)] == 0):
            raise DataError("centers must be pairwise distinct")
        object.__setattr__(self, "centers", centers)

    @classmethod
    def ring(cls, n_classes=4, dim=2, radius=6.0, sigma=1.0, ood="far", seed=0, far_distance=20.0):
        """Centers evenly spaced on a circle in the first two coordinates."""
        angles = 2 * np.pi * np.arange(n_classes) / n_classes
        centers = np.zeros((n_classes, dim))
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
        return cls(centers, sigma, ood, far_distance, seed)

    @property
    def n_classes(self):
        return len(self.centers)

    @property
    def dim(self):
        return self.centers.shape[1]

    def far_center(self):
        rng = np.random.default_rng([self.seed, 1])
        u = rng.normal(size=self.dim)
        u /= np.linalg.norm(u)
        centroid = self.centers.mean(axis=0)
        reach = np.max((self.centers - centroid) @ u)
        return centroid + u * (reach + self.far_distance * self.sigma)


def sample_task(spec, n_per_class, n_ood):
    """Raw samples ``(X_train, y_train, X_test, y_test, X_ood)``.

    Train and test each hold ``n_per_class`` samples per class.
    """
    rng = np.random.default_rng([spec.seed, 0])
    k, d, s = spec.n_classes, spec.dim, spec.sigma

    def blobs():
        y = np.repeat(np.arange(k), n_per_class)
        return spec.centers[y] + s * rng.normal(size=(len(y), d)), y

    X_train, y_train = blobs()
    X_test, y_test = blobs()
    if spec.ood == "far":
        X_ood = spec.far_center() + s * rng.normal(size=(n_ood, d))
    else:
        first = rng.integers(0, k, n_ood)
        second = (first + rng.integers(1, k, n_ood)) % k
        mid = 0.5 * (spec.centers[first] + spec.centers[second])
        X_ood = mid + s * rng.normal(size=(n_ood, d))
    return X_train, y_train, X_test, y_test, X_ood.reshape(n_ood, d)


def generate_task(spec, net, n_per_class, n_ood):
    """Forward the samples of ``sample_task`` through ``net`` into archives.

    Returns ``(train, test, ood)``; the OOD archive carries no labels.
    """
    X_train, y_train, X_test, y_test, X_ood = sample_task(spec, n_per_class, n_ood)
    return (
        to_archive(net, X_train, y_train),
        to_archive(net, X_test, y_test),
        to_archive(net, X_ood),
    )
