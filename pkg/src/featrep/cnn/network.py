"""Checkpoints, weight initialisation, forward pass and backpropagation."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .. import numerics
from ..errors import LabelOutOfRange, NonFiniteActivation, ShapeMismatch
from . import layers as L
from .spec import NetworkSpec, extraction_points, input_shapes, shape_plan


def param_names(spec):
    names = []
    for i, layer in enumerate(spec.layers):
        if layer.has_weights:
            names += [f"L{i}.W", f"L{i}.b"]
    return names


def weight_shape(spec, i, in_shape):
    layer = spec.layers[i]
    width = spec.layer_width(i)
    if layer.kind == "conv":
        return (width, in_shape[0], *layer.kernel)
    return (width, int(np.prod(in_shape)))


@dataclass
class Checkpoint:
    """Complete trainable state of one network."""

    spec: NetworkSpec
    params: dict
    velocity: dict
    epoch: int = 0
    seed: int = 0
    rng_state: dict = field(default_factory=dict)

    def copy(self):
        return Checkpoint(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            velocity={k: v.copy() for k, v in self.velocity.items()},
            epoch=self.epoch,
            seed=self.seed,
            rng_state=copy.deepcopy(self.rng_state),
        )

    def astype(self, dtype):
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        out.velocity = {k: v.astype(dtype) for k, v in out.velocity.items()}
        return out

    def save(self, path):
        header = {
            "format": "featrep-checkpoint-1",
            "spec": self.spec.to_dict(),
            "epoch": self.epoch,
            "seed": self.seed,
            "rng_state": self.rng_state,
        }
        tensors = {}
        for name in param_names(self.spec):
            tensors[name] = self.params[name]
            tensors["v:" + name] = self.velocity[name]
        numerics.save_container(path, header, tensors)

    @classmethod
    def load(cls, path):
        header, tensors = numerics.load_container(path)
        spec = NetworkSpec.from_dict(header["spec"])
        names = param_names(spec)
        return cls(
            spec=spec,
            params={n: tensors[n] for n in names},
            velocity={n: tensors["v:" + n] for n in names},
            epoch=int(header["epoch"]),
            seed=int(header["seed"]),
            rng_state=header.get("rng_state", {}),
        )


def init_weights(spec, rng, dtype=np.float64, seed=0):
    """Glorot-uniform weights, zero biases, zero momentum.

    ``rng`` may be a Generator or an integer seed.
    """
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = numerics.fork_rng(seed, "init")
    params, velocity = {}, {}
    for i, (layer, in_shape) in enumerate(zip(spec.layers, input_shapes(spec))):
        if not layer.has_weights:
            continue
        shape = weight_shape(spec, i, in_shape)
        receptive = int(np.prod(shape[2:])) if len(shape) == 4 else 1
        fan_in = int(np.prod(shape[1:]))
        fan_out = shape[0] * receptive
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"L{i}.W"] = rng.uniform(-a, a, size=shape).astype(dtype)
        params[f"L{i}.b"] = np.zeros(shape[0], dtype=dtype)
    for k, v in params.items():
        velocity[k] = np.zeros_like(v)
    dropout_state = numerics.rng_state(numerics.fork_rng(seed, "dropout"))
    return Checkpoint(spec=spec, params=params, velocity=velocity, epoch=0, seed=seed,
                      rng_state=dropout_state)


@dataclass
class ForwardResult:
    """Per-layer activations of one batch.

    ``activations[0]`` is the input; ``activations[i + 1]`` is the output of
    ``spec.layers[i]``. ``probs`` is the softmax output.
    """

    spec: NetworkSpec
    activations: list
    caches: list

    @property
    def probs(self):
        return self.activations[-1]

    def feature(self, k):
        """Activation of numbered feature layer ``k`` (0 = input)."""
        if k == 0:
            return self.activations[0]
        return self.activations[extraction_points(self.spec)[k - 1] + 1]


def _as_batch(spec, batch):
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (spec.input_side, spec.input_side):
        raise ShapeMismatch(f"batch shape {x.shape} does not match input side {spec.input_side}")
    return x


def _activate(layer, z, cache):
    if layer.activation == "relu":
        mask = z > 0
        cache["relu"] = mask
        return z * mask
    pieces = layer.maxout_pieces
    if pieces > 1:
        squeeze = z.ndim == 2
        z4 = z[:, :, None, None] if squeeze else z
        out, arg = L.maxout_forward(z4, pieces)
        cache["maxout"] = arg
        return out[:, :, 0, 0] if squeeze else out
    return z


def _deactivate(layer, dout, cache):
    if "relu" in cache:
        return dout * cache["relu"]
    if "maxout" in cache:
        pieces = layer.maxout_pieces
        squeeze = dout.ndim == 2
        d4 = dout[:, :, None, None] if squeeze else dout
        dz = L.maxout_backward(d4, cache["maxout"], pieces)
        return dz[:, :, 0, 0] if squeeze else dz
    return dout


def forward(ckpt, batch, mode="eval", rng=None, masks=None, params=None, check=True):
    """Run the network on ``batch`` of shape (N, 1, H, W) or (N, H, W).

    In ``train`` mode each layer with a dropout rate multiplies its input by
    an inverted-dropout mask, taken from ``masks[i]`` when supplied and drawn
    from ``rng`` otherwise. ``eval`` mode never drops anything.
    """
    spec = ckpt.spec
    params = ckpt.params if params is None else params
    x = _as_batch(spec, batch)
    dtype = params[next(iter(params))].dtype if params else np.float64
    x = x.astype(dtype, copy=False)
    acts = [x]
    caches = []
    for i, layer in enumerate(spec.layers):
        cache = {"in_shape": x.shape}
        if mode == "train" and layer.dropout_rate > 0:
            if masks is not None and i in masks:
                mask = masks[i].astype(dtype, copy=False)
            else:
                mask = L.dropout_mask(x.shape, layer.dropout_rate, rng, dtype)
            cache["dropout"] = mask
            x = x * mask
        if layer.kind == "conv":
            cache["x"] = x
            z, cols = L.conv_forward(x, params[f"L{i}.W"], params[f"L{i}.b"], layer.stride, layer.padding)
            cache["cols"] = cols
            out = _activate(layer, z, cache)
        elif layer.kind == "maxpool":
            out, sw = L.maxpool_forward(x, layer.kernel, layer.stride, layer.ceil_mode)
            cache["switches"] = sw
        else:
            flat = x.reshape(x.shape[0], -1)
            cache["x"] = flat
            z = flat @ params[f"L{i}.W"].T + params[f"L{i}.b"]
            if layer.kind == "softmax":
                out = L.softmax(z)
            else:
                out = _activate(layer, z, cache)
        if check and not np.all(np.isfinite(out)):
            raise NonFiniteActivation(f"layer {i} ({layer.kind}) produced NaN/Inf")
        caches.append(cache)
        acts.append(out)
        x = out
    return ForwardResult(spec=spec, activations=acts, caches=caches)


def predict_proba(ckpt, images, batch_size=256):
    x = _as_batch(ckpt.spec, images)
    out = [forward(ckpt, x[s:s + batch_size]).probs for s in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, ckpt.spec.n_classes))
    return np.concatenate(out).astype(np.float64)


def loss_cross_entropy(probs, labels):
    """Mean of ``-log p[label]`` with probabilities clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"{labels.shape} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    picked = probs[np.arange(n), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def backprop(ckpt, fwd, labels, params=None):
    """Gradients of the mean cross-entropy for the batch behind ``fwd``."""
    spec = ckpt.spec
    params = ckpt.params if params is None else params
    probs = fwd.probs
    n = probs.shape[0]
    labels = np.asarray(labels)
    if n and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {probs.shape[1]})")
    grads = {}
    dout = probs.copy()
    dout[np.arange(n), labels] -= 1.0
    dout /= n
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = fwd.caches[i]
        need_dx = i > 0
        if layer.kind == "softmax" or layer.kind == "fully_connected":
            dz = dout if layer.kind == "softmax" else _deactivate(layer, dout, cache)
            w = params[f"L{i}.W"]
            grads[f"L{i}.W"] = dz.T @ cache["x"]
            grads[f"L{i}.b"] = dz.sum(axis=0)
            dx = (dz @ w).reshape(cache["in_shape"]) if need_dx else None
        elif layer.kind == "conv":
            dz = _deactivate(layer, dout, cache)
            dx, dw, db = L.conv_backward(dz, cache["x"].shape, cache["cols"], params[f"L{i}.W"],
                                         layer.stride, layer.padding, need_dx=need_dx)
            grads[f"L{i}.W"] = dw
            grads[f"L{i}.b"] = db
        else:
            dx = L.unpool(dout, cache["switches"], cache["in_shape"]) if need_dx else None
        if dx is not None and "dropout" in cache:
            dx = dx * cache["dropout"]
        dout = dx
    return grads


def backward(ckpt, batch, labels, rng=None, masks=None, params=None):
    """Train-mode forward followed by backprop; returns (loss, grads)."""
    fwd = forward(ckpt, batch, mode="train", rng=rng, masks=masks, params=params)
    loss = loss_cross_entropy(fwd.probs, labels)
    return loss, backprop(ckpt, fwd, labels, params=params)


def check_plan(spec, fwd):
    """Compare actual activation shapes to ``shape_plan``."""
    plan = shape_plan(spec)
    actual = [a.shape[1:] for a in fwd.activations[1:]]
    return actual == plan
