"""Back-projection of one feature map to pixel space through switches and transposed convolutions.

The descent mirrors the forward pass layer by layer: max-pool layers unpool
through the recorded switches, activations are gated with the forward
pass's own masks (ReLU: positive pre-activation; maxout: the winning piece),
and conv / dense layers apply the transpose of their own weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cnn import layers as L
from .cnn.network import _deactivate, forward
from .cnn.spec import extraction_points, feature_shapes
from .errors import FeatureOutOfRange, LayerOutOfRange, ShapeMismatch


@dataclass
class SwitchRecord:
    """Forward pass of a single image with the max-pool argmax positions.

    ``switches[i]`` belongs to ``spec.layers[i]`` (a max-pool layer) and holds
    flat ``row * width + col`` positions in that layer's input.
    """

    fwd: object
    switches: dict

    @property
    def activations(self):
        return self.fwd.activations


@dataclass
class Projection:
    image: np.ndarray
    layer_index: int
    feature_index: int
    source_sample: int | None
    activation_value: float

    def normalized(self):
        """Affine map of the image's min..max onto 0..1 (a flat image maps to 0)."""
        lo, hi = float(self.image.min()), float(self.image.max())
        if hi == lo:
            return np.zeros_like(self.image)
        return (self.image - lo) / (hi - lo)

    def write_pgm(self, path):
        """8-bit binary PGM plus a JSON sidecar at ``path + '.json'``."""
        img = np.rint(self.normalized() * 255.0).astype(np.uint8)
        h, w = img.shape
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
        meta = {"layer": self.layer_index, "feature": self.feature_index,
                "activation": self.activation_value, "sample_id": self.source_sample}
        Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def record_forward(ckpt, image):
    """Eval-mode forward pass of one (H, W) image, keeping every pool layer's switches."""
    x = np.asarray(image)
    side = ckpt.spec.input_side
    if x.shape != (side, side):
        raise ShapeMismatch(f"image shape {x.shape}, network expects ({side}, {side})")
    fwd = forward(ckpt, x[None, None], mode="eval")
    switches = {i: c["switches"] for i, c in enumerate(fwd.caches) if "switches" in c}
    return SwitchRecord(fwd, switches)


def replay_pool(x, switches):
    """Pooled map reconstructed by reading ``x`` at the recorded switch positions."""
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    ho, wo = switches.shape[2:]
    return np.take_along_axis(flat, switches.reshape(n, c, -1), axis=2).reshape(n, c, ho, wo)


def _check_layer(spec, layer_index):
    top = len(extraction_points(spec))
    if not 1 <= layer_index <= top:
        raise LayerOutOfRange(f"layer {layer_index} outside 1..{top}")
    return extraction_points(spec)[layer_index - 1]


def project_map(ckpt, record, layer_index, feature_map):
    """Send an arbitrary map shaped like feature layer ``layer_index`` down to pixel space.

    Linear in ``feature_map``. Returns the raw (H, W) image.
    """
    spec = ckpt.spec
    point = _check_layer(spec, layer_index)
    shape = feature_shapes(spec)[layer_index]
    y = np.asarray(feature_map, dtype=np.float64).reshape((1,) + tuple(shape))
    params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    for i in range(point, -1, -1):
        layer = spec.layers[i]
        cache = record.fwd.caches[i]
        if layer.kind == "maxpool":
            y = L.unpool(y, record.switches[i], cache["in_shape"])
        elif layer.kind == "conv":
            y = _deactivate(layer, y, cache)
            y = L.conv_transpose(y, params[f"L{i}.W"], cache["in_shape"], layer.stride, layer.padding)
        elif layer.kind == "fully_connected":
            y = _deactivate(layer, y, cache)
            y = (y @ params[f"L{i}.W"]).reshape(cache["in_shape"])
        else:
            raise LayerOutOfRange("cannot project from the softmax output")
    return y[0, 0]


def project(ckpt, record, layer_index, feature_index, sample_id=None):
    """Project the ``feature_index`` channel of feature layer ``layer_index``, all other channels zeroed."""
    spec = ckpt.spec
    _check_layer(spec, layer_index)
    act = record.fwd.feature(layer_index)[0].astype(np.float64)
    if not 0 <= feature_index < act.shape[0]:
        raise FeatureOutOfRange(f"feature {feature_index} outside 0..{act.shape[0] - 1}")
    seeded = np.zeros_like(act)
    seeded[feature_index] = act[feature_index]
    image = project_map(ckpt, record, layer_index, seeded)
    return Projection(image, layer_index, feature_index, sample_id, float(act[feature_index].max()))


def feature_strength(ckpt, images, layer_index, feature_index, batch_size=256):
    """Max spatial activation of one feature for every image."""
    spec = ckpt.spec
    _check_layer(spec, layer_index)
    x = np.asarray(images, dtype=np.float64)
    side = spec.input_side
    x = x.reshape(-1, 1, side, side)
    out = []
    for s in range(0, len(x), batch_size):
        a = forward(ckpt, x[s:s + batch_size]).feature(layer_index)
        if not 0 <= feature_index < a.shape[1]:
            raise FeatureOutOfRange(f"feature {feature_index} outside 0..{a.shape[1] - 1}")
        out.append(a[:, feature_index].reshape(a.shape[0], -1).max(axis=1))
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def top_activating_samples(ckpt, images, layer_index, feature_index, k):
    """``(sample_id, activation)`` pairs, strongest first; equal strengths keep sample order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    strength = feature_strength(ckpt, images, layer_index, feature_index)
    order = np.argsort(-strength, kind="stable")[:k]
    return [(int(i), float(strength[i])) for i in order]
