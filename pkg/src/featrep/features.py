"""Layer activations as flat feature matrices."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics
from .cnn.network import forward
from .cnn.spec import extraction_points
from .errors import FormatError, LayerOutOfRange


@dataclass
class FeatureMatrix:
    values: np.ndarray
    labels: np.ndarray
    layer_index: int
    source_epoch: int = 0
    spec_name: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[0] != self.labels.shape[0]:
            raise ValueError(f"values {self.values.shape} do not match {self.labels.shape[0]} labels")

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_features(self):
        return self.values.shape[1]

    def equals(self, other):
        return (
            self.values.shape == other.values.shape
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.labels, other.labels)
            and (self.layer_index, self.source_epoch, self.spec_name)
            == (other.layer_index, other.source_epoch, other.spec_name)
        )


def n_feature_layers(spec):
    """Highest valid layer index; layer 0 is the raw input."""
    return len(extraction_points(spec))


def _images_to_arrays(images):
    if isinstance(images, tuple):
        x, y = images
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    if not images:
        return np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64)
    x = np.stack([im.pixels for im in images]).astype(np.float64)
    y = np.array([im.class_id for im in images], dtype=np.int64)
    return x, y


def extract_layers(ckpt, images, layers=None, batch_size=256):
    """Feature matrices for several layers from one eval-mode pass.

    ``images`` is a list of ``LabeledImage`` or an ``(x, y)`` pair.
    Returns ``{layer_index: FeatureMatrix}``; activations are flattened in
    row-major (channel, row, column) order and stored as float64.
    """
    spec = ckpt.spec
    top = n_feature_layers(spec)
    layers = list(range(top + 1)) if layers is None else list(layers)
    for k in layers:
        if not 0 <= k <= top:
            raise LayerOutOfRange(f"layer {k} outside 0..{top} for {spec.name}")
    x, y = _images_to_arrays(images)
    chunks = {k: [] for k in layers}
    side = spec.input_side
    for s in range(0, len(y), batch_size):
        fwd = forward(ckpt, x[s:s + batch_size].reshape(-1, 1, side, side), mode="eval")
        for k in layers:
            a = fwd.feature(k)
            chunks[k].append(a.reshape(a.shape[0], -1).astype(np.float64))
    out = {}
    for k in layers:
        if chunks[k]:
            values = np.concatenate(chunks[k])
        else:
            d = int(np.prod(_feature_shape(spec, k)))
            values = np.zeros((0, d))
        out[k] = FeatureMatrix(values, y, k, ckpt.epoch, spec.name)
    return out


def _feature_shape(spec, k):
    from .cnn.spec import feature_shapes

    return feature_shapes(spec)[k]


def extract(ckpt, images, layer_index, batch_size=256):
    return extract_layers(ckpt, images, [layer_index], batch_size)[layer_index]


def zscore(train, *others):
    """Standardise columns with the statistics of ``train``; constant columns become 0."""
    mu = train.values.mean(axis=0)
    sd = train.values.std(axis=0)
    sd[sd == 0] = 1.0

    def apply(m):
        return FeatureMatrix((m.values - mu) / sd, m.labels, m.layer_index, m.source_epoch, m.spec_name)

    return [apply(m) for m in (train, *others)]


def _sidecar(path):
    return Path(str(path) + ".json")


def save_matrix(m, path):
    """CPT1 tensor at ``path`` plus a JSON sidecar at ``path + '.json'``."""
    numerics.save_tensor(path, m.values)
    meta = {
        "labels": [int(v) for v in m.labels],
        "layer_index": int(m.layer_index),
        "source_epoch": int(m.source_epoch),
        "spec_name": m.spec_name,
    }
    _sidecar(path).write_text(numerics.dump_json(meta) + "\n")


def load_matrix(path):
    values = numerics.load_tensor(path)
    if values.ndim != 2:
        raise FormatError(f"{path}: expected a rank-2 tensor, got rank {values.ndim}")
    try:
        meta = json.loads(_sidecar(path).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing sidecar {_sidecar(path)}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt sidecar: {exc}") from exc
    labels = np.array(meta["labels"], dtype=np.int64)
    if labels.shape[0] != values.shape[0]:
        raise FormatError(f"{len(labels)} labels for {values.shape[0]} rows")
    return FeatureMatrix(values, labels, meta["layer_index"], meta["source_epoch"], meta["spec_name"])
