"""Declarative network descriptions and shape propagation."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from ..errors import BadParam, ShapePlanError
from .layers import conv_output_size

KINDS = ("conv", "maxpool", "fully_connected", "softmax")
_MAXOUT = re.compile(r"^maxout\((\d+)\)$")


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    return (int(v[0]), int(v[1]))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    activation: str = "none"
    dropout_rate: float = 0.0
    ceil_mode: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadParam(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.activation not in ("relu", "none") and not _MAXOUT.match(self.activation):
            raise BadParam(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise BadParam(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kind == "maxpool" and self.padding != (0, 0):
            raise BadParam("max-pool layers take no padding; pad the preceding conv instead")
        if self.kind in ("conv", "fully_connected") and self.filters < 1:
            raise BadParam(f"{self.kind} layer needs filters >= 1")
        if self.maxout_pieces > 1 and self.filters % self.maxout_pieces:
            raise BadParam(f"maxout({self.maxout_pieces}) needs filters divisible by it, got {self.filters}")

    @property
    def maxout_pieces(self):
        m = _MAXOUT.match(self.activation)
        return int(m.group(1)) if m else 1

    @property
    def has_weights(self):
        return self.kind in ("conv", "fully_connected", "softmax")

    @property
    def out_channels(self):
        return self.filters // self.maxout_pieces

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "conv" or self.kind == "fully_connected" or (self.kind == "softmax" and self.filters):
            d["filters"] = self.filters
        if self.kind in ("conv", "maxpool"):
            d.update(kernel=list(self.kernel), stride=list(self.stride), padding=list(self.padding))
        if self.kind == "maxpool":
            d["ceil_mode"] = self.ceil_mode
        if self.activation != "none":
            d["activation"] = self.activation
        if self.dropout_rate:
            d["dropout_rate"] = self.dropout_rate
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("comment", None)
        return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_side: int
    layers: tuple = field(default_factory=tuple)
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or self.layers[-1].kind != "softmax":
            raise BadParam("the last layer must be softmax")

    def with_classes(self, n_classes):
        return replace(self, n_classes=int(n_classes))

    def layer_width(self, i):
        """Number of linear units of layer ``i`` (softmax width defaults to n_classes)."""
        layer = self.layers[i]
        if layer.kind == "softmax":
            return self.n_classes
        return layer.filters

    def to_dict(self):
        return {
            "name": self.name,
            "input_side": self.input_side,
            "n_classes": self.n_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            input_side=int(d["input_side"]),
            n_classes=int(d.get("n_classes", 2)),
            layers=[LayerSpec.from_dict(l) for l in d["layers"]],
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def builtin_spec(name):
    """Load one of the shipped architectures: ``cnn1``, ``cnn2`` or ``cnn3``."""
    text = resources.files("featrep.configs").joinpath(f"{name}.json").read_text()
    return NetworkSpec.from_dict(json.loads(text))


def shape_plan(spec):
    """Output shape of every layer, in order.

    Spatial extents follow ``floor((in + 2*pad - kernel) / stride) + 1``;
    pooling layers in ceil mode round up instead. Dense layers report a
    1-tuple.
    """
    shape = (1, spec.input_side, spec.input_side)
    plan = []
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("conv", "maxpool"):
            if len(shape) != 3:
                raise ShapePlanError(f"layer {i} ({layer.kind}) needs a spatial input, got {shape}")
            c, h, w = shape
            ceil = layer.kind == "maxpool" and layer.ceil_mode
            ho = conv_output_size(h, layer.kernel[0], layer.stride[0], layer.padding[0], ceil)
            wo = conv_output_size(w, layer.kernel[1], layer.stride[1], layer.padding[1], ceil)
            if ho < 1 or wo < 1:
                raise ShapePlanError(f"layer {i} ({layer.kind}) output {ho}x{wo} from input {h}x{w}")
            shape = (layer.out_channels if layer.kind == "conv" else c, ho, wo)
        else:
            width = spec.layer_width(i)
            if layer.kind == "fully_connected":
                width //= layer.maxout_pieces
            shape = (width,)
        plan.append(shape)
    if plan[-1] != (spec.n_classes,):
        raise ShapePlanError(f"final layer outputs {plan[-1]}, expected ({spec.n_classes},)")
    return plan


def input_shapes(spec):
    plan = shape_plan(spec)
    return [(1, spec.input_side, spec.input_side)] + plan[:-1]


def extraction_points(spec):
    """Indices into ``spec.layers`` whose outputs are the numbered feature layers.

    Numbered layer ``k`` (1-based) is a conv or dense layer together with the
    max-pool that directly follows it; the softmax output is not a feature
    layer. Feature layer 0 is the raw input.
    """
    points = []
    layers = spec.layers
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            nxt = i + 1
            points.append(nxt if nxt < len(layers) and layers[nxt].kind == "maxpool" else i)
        elif layer.kind == "fully_connected":
            points.append(i)
    return points


def feature_shapes(spec):
    plan = shape_plan(spec)
    return [(1, spec.input_side, spec.input_side)] + [plan[i] for i in extraction_points(spec)]
