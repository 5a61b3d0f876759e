"""Activation archives: per-layer features, logits and labels for one split.

On disk an archive is a JSON manifest next to NPY tensor files::

    {"layers": [{"name": "block1", "file": "block1.npy", "role": "activation"}],
     "logits": {"file": "logits.npy"},
     "labels": {"file": "labels.npy"},
     "inputs": {"file": "inputs.npy"}}

``labels`` and ``inputs`` are optional. File paths are relative to the
manifest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    DataError,
    InconsistentSampleCount,
    LabelOutOfRange,
    MissingLogits,
    UnsupportedDtype,
)
from .npy import load_npy, save_npy


def _frozen(arr, kind):
    arr = np.asarray(arr)
    if kind == "float":
        if arr.dtype not in (np.float32, np.float64):
            if not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
                raise UnsupportedDtype(f"expected a real array, got {arr.dtype}")
            arr = arr.astype(np.float64)
    else:
        if not np.issubdtype(arr.dtype, np.integer):
            raise UnsupportedDtype(f"labels must be integers, got {arr.dtype}")
        arr = arr.astype(np.int64)
    arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ActivationArchive:
    """Immutable bundle of activations for ``n_samples`` inputs.

    Attributes:
        layers: ``(name, array)`` pairs in forward order. Each array has the
            sample axis first, e.g. ``[N, C]`` or ``[N, C, H, W]``.
        logits: ``[N, K]`` classifier outputs.
        labels: optional ``[N]`` ground-truth class indices.
        raw_inputs: optional ``[N, D]`` network inputs.
    """

    layers: tuple = ()
    logits: np.ndarray | None = None
    labels: np.ndarray | None = None
    raw_inputs: np.ndarray | None = None
    _n: int = field(default=0, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.logits is None:
            raise MissingLogits("archive has no logits")
        layers = tuple((str(name), _frozen(arr, "float")) for name, arr in self.layers)
        logits = _frozen(self.logits, "float")
        if logits.ndim != 2:
            raise DataError(f"logits must be [N, K], got shape {logits.shape}")
        if logits.shape[1] < 2:
            raise DataError("logits need at least two classes")
        n = logits.shape[0]
        for name, arr in layers:
            if arr.ndim < 2:
                raise DataError(f"layer {name!r} must have rank >= 2, got {arr.shape}")
            if arr.shape[0] != n:
                raise InconsistentSampleCount(
                    f"layer {name!r} has {arr.shape[0]} samples, logits have {n}"
                )
        labels = self.labels
        if labels is not None:
            labels = _frozen(labels, "int")
            if labels.shape != (n,):
                raise InconsistentSampleCount(f"labels shape {labels.shape} != ({n},)")
            if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
                raise LabelOutOfRange(f"labels must lie in [0, {logits.shape[1]})")
        raw = self.raw_inputs
        if raw is not None:
            raw = _frozen(raw, "float")
            if raw.ndim != 2 or raw.shape[0] != n:
                raise InconsistentSampleCount(f"inputs shape {raw.shape} does not match N={n}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "raw_inputs", raw)
        object.__setattr__(self, "_n", n)

    @property
    def n_samples(self) -> int:
        return self._n

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def layer_names(self) -> list[str]:
        return [name for name, _ in self.layers]

    def __len__(self):
        return self._n

    def subset(self, index) -> "ActivationArchive":
        """Archive restricted to the samples selected by ``index``."""
        index = np.asarray(index)
        return ActivationArchive(
            layers=[(name, arr[index]) for name, arr in self.layers],
            logits=self.logits[index],
            labels=None if self.labels is None else self.labels[index],
            raw_inputs=None if self.raw_inputs is None else self.raw_inputs[index],
        )

    def __eq__(self, other):
        if not isinstance(other, ActivationArchive):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)

        return (
            self.layer_names == other.layer_names
            and all(same(a, b) for (_, a), (_, b) in zip(self.layers, other.layers))
            and same(self.logits, other.logits)
            and same(self.labels, other.labels)
            and same(self.raw_inputs, other.raw_inputs)
        )

    __hash__ = None


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    if not isinstance(manifest, dict):
        raise DataError("manifest must be a JSON object")
    return manifest


def _entry_file(entry, what) -> str:
    if not isinstance(entry, dict) or not isinstance(entry.get("file"), str):
        raise DataError(f"{what} entry must be an object with a 'file' string")
    return entry["file"]


def load_archive(manifest_path) -> ActivationArchive:
    """Load and validate the archive described by a JSON manifest."""
    manifest_path = Path(manifest_path)
    manifest = _read_manifest(manifest_path)
    root = manifest_path.parent

    def tensor(entry, what):
        path = root / _entry_file(entry, what)
        try:
            return load_npy(path)
        except OSError as exc:
            raise DataError(f"cannot read {what} tensor {path}: {exc}") from None

    if "logits" not in manifest:
        raise MissingLogits(f"{manifest_path} declares no logits")
    layers_spec = manifest.get("layers", [])
    if not isinstance(layers_spec, list):
        raise DataError("'layers' must be an array")
    layers = []
    for i, entry in enumerate(layers_spec):
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise DataError(f"layer {i} needs a 'name' string")
        if entry.get("role", "activation") != "activation":
            raise DataError(f"layer {entry['name']!r} has unknown role {entry.get('role')!r}")
        layers.append((entry["name"], tensor(entry, f"layer {entry['name']!r}")))
    return ActivationArchive(
        layers=layers,
        logits=tensor(manifest["logits"], "logits"),
        labels=tensor(manifest["labels"], "labels") if "labels" in manifest else None,
        raw_inputs=tensor(manifest["inputs"], "inputs") if "inputs" in manifest else None,
    )


def save_archive(archive: ActivationArchive, directory, manifest_name="manifest.json"):
    """Write ``archive`` to ``directory`` and return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"layers": []}
    for i, (name, arr) in enumerate(archive.layers):
        fname = f"layer{i}.npy"
        save_npy(directory / fname, arr)
        manifest["layers"].append({"name": name, "file": fname, "role": "activation"})
    save_npy(directory / "logits.npy", archive.logits)
    manifest["logits"] = {"file": "logits.npy"}
    if archive.labels is not None:
        save_npy(directory / "labels.npy", archive.labels)
        manifest["labels"] = {"file": "labels.npy"}
    if archive.raw_inputs is not None:
        save_npy(directory / "inputs.npy", archive.raw_inputs)
        manifest["inputs"] = {"file": "inputs.npy"}
    path = directory / manifest_name
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def predicted_classes(archive_or_logits) -> np.ndarray:
    """Per-sample argmax of the logits; ties go to the lowest class index."""
    logits = (
        archive_or_logits.logits
        if isinstance(archive_or_logits, ActivationArchive)
        else np.asarray(archive_or_logits)
    )
    # np.argmax returns the first maximal index
    return np.argmax(logits, axis=1).astype(np.int64)


def spatial_mean(tensor) -> np.ndarray:
    """Average ``[N, C, ...spatial]`` over its trailing axes, giving ``[N, C]``."""
    tensor = np.asarray(tensor)
    if tensor.ndim < 2:
        raise DataError(f"expected rank >= 2, got shape {tensor.shape}")
    if tensor.ndim == 2:
        return tensor
    return tensor.reshape(tensor.shape[0], tensor.shape[1], -1).mean(axis=2)
