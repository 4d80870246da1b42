"""Mini-batch SGD with momentum and max-norm, epoch checkpoints, bagging."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import numerics
from ..errors import BadParam, DivergenceDetected, EmptyEnsemble
from .network import Checkpoint, backward, init_weights, loss_cross_entropy, predict_proba

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # none of these values are published for the original networks
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_norm_cap: float = 3.0
    epochs: int = 30
    checkpoint_every: int = 1
    precision: str = "f32"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_every < 1:
            raise BadParam("batch_size, checkpoint_every must be >= 1 and epochs >= 0")
        if self.learning_rate <= 0 or self.max_norm_cap <= 0:
            raise BadParam("learning_rate and max_norm_cap must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise BadParam("momentum must be in [0, 1)")
        numerics.float_dtype(self.precision)

    def to_dict(self):
        return asdict(self)


def max_norm_(w, cap):
    """Project every row (FC unit) or filter (conv) of ``w`` onto the L2 ball of radius ``cap``, in place."""
    rows = w.reshape(w.shape[0], -1)
    norms = np.sqrt(np.einsum("ij,ij->i", rows, rows))
    # a few ulps of slack keep the projection idempotent after rounding
    over = norms > cap * (1 + 4 * np.finfo(w.dtype).eps)
    if np.any(over):
        rows[over] *= (cap / norms[over])[:, None].astype(w.dtype)
    return w


def sgd_momentum_step(ckpt, grads, cfg):
    """``v <- mu*v - lr*g``; ``w <- w + v``; then max-norm on weight tensors.

    Updates ``ckpt`` in place and returns it.
    """
    for name, g in grads.items():
        v = ckpt.velocity[name]
        w = ckpt.params[name]
        v *= cfg.momentum
        v -= cfg.learning_rate * g.astype(v.dtype, copy=False)
        w += v
        if name.endswith(".W"):
            max_norm_(w, cfg.max_norm_cap)
    return ckpt


def accuracy(ckpt, x, y):
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict_proba(ckpt, x).argmax(axis=1) == y))


@dataclass
class TrainResult:
    checkpoints: list
    metrics: list = field(default_factory=list)

    def at_epoch(self, epoch):
        for c in self.checkpoints:
            if c.epoch == epoch:
                return c
        raise KeyError(epoch)

    @property
    def final(self):
        return self.checkpoints[-1]


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['train_loss']:.10g}", f"{r['val_acc']:.10g}"])


def train(spec, data, cfg, out_dir=None):
    """Train ``spec`` on ``data.train``; returns checkpoints and per-epoch metrics.

    The epoch-0 checkpoint holds the untouched initial weights. A checkpoint
    is kept every ``cfg.checkpoint_every`` epochs and after the last epoch.
    Epoch 0's ``train_loss`` is the eval-mode loss of the initial weights;
    later rows average the mini-batch losses of that epoch.
    """
    dtype = numerics.float_dtype(cfg.precision)
    x_tr, y_tr = data.arrays("train")
    x_va, y_va = data.arrays("validation")
    if x_tr.shape[1] != spec.input_side:
        raise BadParam(f"data side {x_tr.shape[1]} != network input side {spec.input_side}")
    x_tr = x_tr.astype(dtype)[:, None]
    x_va = x_va.astype(dtype)[:, None]

    ckpt = init_weights(spec, cfg.seed, dtype=np.float64, seed=cfg.seed).astype(dtype)
    shuffle_rng = numerics.fork_rng(cfg.seed, "shuffle")
    dropout_rng = numerics.rng_from_state(ckpt.rng_state)

    def snapshot():
        c = ckpt.copy()
        c.rng_state = {"dropout": numerics.rng_state(dropout_rng), "shuffle": numerics.rng_state(shuffle_rng)}
        return c

    init_loss = loss_cross_entropy(predict_proba(ckpt, x_tr), y_tr) if len(y_tr) else float("nan")
    metrics = [{"epoch": 0, "train_loss": init_loss, "val_acc": accuracy(ckpt, x_va, y_va)}]
    checkpoints = [snapshot()]
    n = len(y_tr)
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = backward(ckpt, x_tr[idx], y_tr[idx], rng=dropout_rng)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss} in epoch {epoch}", last_good=checkpoints[-1])
            sgd_momentum_step(ckpt, grads, cfg)
            total += loss * len(idx)
        ckpt.epoch = epoch
        row = {"epoch": epoch, "train_loss": total / max(n, 1), "val_acc": accuracy(ckpt, x_va, y_va)}
        metrics.append(row)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, row["train_loss"], row["val_acc"])
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            checkpoints.append(snapshot())

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for c in checkpoints:
            c.save(out / f"epoch_{c.epoch:03d}.ckpt")
        write_metrics(metrics, out / "metrics.csv")
    return TrainResult(checkpoints, metrics)


def bagged_proba(ckpts, images):
    if not ckpts:
        raise EmptyEnsemble("bagging needs at least one checkpoint")
    n_classes = {c.spec.n_classes for c in ckpts}
    if len(n_classes) != 1:
        raise BadParam(f"ensemble members disagree on n_classes: {sorted(n_classes)}")
    total = None
    for c in ckpts:
        p = predict_proba(c, images)
        total = p if total is None else total + p
    return total / len(ckpts)


def bagged_predict(ckpts, images):
    """Average member class probabilities, then argmax (ties go to the lowest class id)."""
    return bagged_proba(ckpts, images).argmax(axis=1)


def member_seeds(seed, k):
    return [numerics.derive_seed(seed, "bagging", i) for i in range(k)]
