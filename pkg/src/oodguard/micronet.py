"""A small dense ReLU classifier with exact input gradients.

This stands in for a real trained model: it produces per-layer
activations for the detectors, and its input gradients drive FGSM and the
input perturbation of the Mahalanobis detector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .archive import ActivationArchive
from .energy import logsumexp
from .exceptions import DataError, DimensionMismatch
from .npy import load_npy, save_npy

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class DenseLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionMismatch(f"weight {w.shape} and bias {b.shape} do not fit")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


class MicroNet:
    """Immutable chain of dense layers; the last one yields logits."""

    def __init__(self, layers):
        layers = tuple(layers)
        if not layers:
            raise DataError("a MicroNet needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise DimensionMismatch("consecutive layer dimensions do not chain")
        if layers[-1].activation != "identity":
            raise DataError("the last layer must be linear (it produces logits)")
        self.layers = layers

    @property
    def n_inputs(self):
        return self.layers[0].weight.shape[1]

    @property
    def n_classes(self):
        return self.layers[-1].weight.shape[0]

    @property
    def n_hidden(self):
        return len(self.layers) - 1

    def __eq__(self, other):
        if not isinstance(other, MicroNet) or len(self.layers) != len(other.layers):
            return NotImplemented
        return all(
            a.activation == b.activation
            and np.array_equal(a.weight, b.weight)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )

    __hash__ = None


def init_net(sizes, seed=0):
    """Layers of widths ``sizes`` (input first), uniform(+-1/sqrt(fan_in)) init."""
    if len(sizes) < 2:
        raise DataError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        act = "identity" if i == len(sizes) - 2 else "relu"
        layers.append(DenseLayer(w, b, act))
    return MicroNet(layers)


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != net.n_inputs:
        raise DimensionMismatch(f"input has shape {x.shape}, net expects {net.n_inputs} features")
    return x, single


def _forward_cache(net, x):
    pre, post = [], []
    h = x
    for layer in net.layers:
        z = h @ layer.weight.T + layer.bias
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        pre.append(z)
        post.append(h)
    return pre, post


def forward(net, x):
    """Run ``x`` (``[D]`` or ``[N, D]``) through the net.

    Returns:
        ``(logits, hidden)`` where ``hidden`` lists the post-activation
        output of every layer except the last.
    """
    x, single = _as_batch(net, x)
    _, post = _forward_cache(net, x)
    if single:
        return post[-1][0], [h[0] for h in post[:-1]]
    return post[-1], post[:-1]


def _backward(net, pre, grad, upto):
    """Backpropagate ``grad`` (w.r.t. output of layer ``upto``) to the input."""
    for i in range(upto, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            # subgradient of ReLU at 0 is 0
            grad = grad * (pre[i] > 0)
        grad = grad @ layer.weight
    return grad


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return np.exp(logits - logsumexp(logits, axis=-1)[..., None])


def cross_entropy(net, x, labels):
    """Per-sample cross-entropy loss."""
    x, single = _as_batch(net, x)
    logits = forward(net, x)[0]
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (x.shape[0],))
    loss = logsumexp(logits, axis=1) - logits[np.arange(x.shape[0]), labels]
    return loss[0] if single else loss


@dataclass(frozen=True)
class LayerFunctional:
    """Scalar function of one layer's output, given by its gradient.

    ``grad(activation)`` maps ``[N, width]`` activations of layer ``layer``
    (``-1`` or ``n_hidden`` for the logits) to ``dL/d activation``.
    """

    layer: int
    grad: Callable[[np.ndarray], np.ndarray]


def input_gradient(net, x, target):
    """Exact gradient of a per-sample loss with respect to the input.

    ``target`` is either class labels (cross-entropy loss) or a
    ``LayerFunctional``. Batched input gives one gradient row per sample.
    """
    x, single = _as_batch(net, x)
    pre, post = _forward_cache(net, x)
    if isinstance(target, LayerFunctional):
        idx = target.layer % len(net.layers)
        grad = np.asarray(target.grad(post[idx]), dtype=np.float64)
        if grad.shape != post[idx].shape:
            raise DimensionMismatch(f"functional gradient shape {grad.shape} != {post[idx].shape}")
    else:
        labels = np.broadcast_to(np.asarray(target, dtype=np.int64), (x.shape[0],))
        if labels.size and (labels.min() < 0 or labels.max() >= net.n_classes):
            raise DataError("label out of range")
        idx = len(net.layers) - 1
        grad = softmax(post[idx])
        grad[np.arange(x.shape[0]), labels] -= 1.0
    out = _backward(net, pre, grad, idx)
    return out[0] if single else out


def fgsm(net, x, labels, epsilon):
    """Fast gradient sign step ``x + epsilon * sign(dCE/dx)``."""
    if not epsilon >= 0:
        raise DataError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    return x + epsilon * np.sign(input_gradient(net, x, labels))


def train(net, X, y, epochs=200, lr=0.05, seed=0, batch_size=32):
    """Minibatch SGD on mean cross-entropy. Returns a new net."""
    X, _ = _as_batch(net, X)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise DimensionMismatch("labels must be [N]")
    rng = np.random.default_rng(seed)
    weights = [np.array(layer.weight) for layer in net.layers]
    biases = [np.array(layer.bias) for layer in net.layers]
    acts = [layer.activation for layer in net.layers]
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            h = X[batch]
            inputs, pre = [], []
            for w, b, act in zip(weights, biases, acts):
                inputs.append(h)
                z = h @ w.T + b
                pre.append(z)
                h = np.maximum(z, 0.0) if act == "relu" else z
            grad = softmax(h)
            grad[np.arange(len(batch)), y[batch]] -= 1.0
            grad /= len(batch)
            for i in range(len(weights) - 1, -1, -1):
                if acts[i] == "relu":
                    grad = grad * (pre[i] > 0)
                gw = grad.T @ inputs[i]
                gb = grad.sum(axis=0)
                grad = grad @ weights[i]
                weights[i] -= lr * gw
                biases[i] -= lr * gb
    return MicroNet(DenseLayer(w, b, a) for w, b, a in zip(weights, biases, acts))


def to_archive(net, X, labels=None, layer_prefix="dense"):
    """Forward ``X`` and pack every hidden layer plus logits into an archive."""
    X, _ = _as_batch(net, X)
    logits, hidden = forward(net, X)
    return ActivationArchive(
        layers=[(f"{layer_prefix}{i}", h) for i, h in enumerate(hidden)],
        logits=logits,
        labels=labels,
        raw_inputs=X,
    )


def save_net(net, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(net.layers):
        save_npy(directory / f"W_{i}.npy", layer.weight)
        save_npy(directory / f"b_{i}.npy", layer.bias)
        entries.append({"weight": f"W_{i}.npy", "bias": f"b_{i}.npy", "activation": layer.activation})
    manifest = {"kind": "micronet", "layers": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_net(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return MicroNet(
        DenseLayer(load_npy(directory / e["weight"]), load_npy(directory / e["bias"]), e["activation"])
        for e in manifest["layers"]
    )


class MicroNetClassifier(ClassifierMixin, BaseEstimator):
    """sklearn wrapper around ``init_net`` + ``train``.

    Parameters
    ----------
    hidden_sizes : tuple of int, default=(32, 32)
    epochs : int, default=200
    lr : float, default=0.05
    batch_size : int, default=32
    random_state : int, default=0
        Seeds both initialisation and shuffling.
    """

    def __init__(self, hidden_sizes=(32, 32), epochs=200, lr=0.05, batch_size=32, random_state=0):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise DataError("need at least two classes")
        sizes = [X.shape[1], *self.hidden_sizes, len(self.classes_)]
        self.initial_net_ = init_net(sizes, seed=self.random_state)
        self.net_ = train(
            self.initial_net_, X, y_idx, self.epochs, self.lr, self.random_state, self.batch_size
        )
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        return forward(self.net_, check_array(X, dtype=np.float64))[0]

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def fgsm(self, X, y, epsilon):
        check_is_fitted(self, "net_")
        y_idx = np.searchsorted(self.classes_, y)
        return fgsm(self.net_, check_array(X, dtype=np.float64), y_idx, epsilon)

    def to_archive(self, X, y=None):
        check_is_fitted(self, "net_")
        labels = None if y is None else np.searchsorted(self.classes_, y)
        return to_archive(self.net_, check_array(X, dtype=np.float64), labels)
