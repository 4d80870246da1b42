"""Linear soft-margin SVMs with one-vs-rest and one-vs-one reductions.

Binary problems minimise ``0.5*||w||^2 + C * sum(max(0, 1 - y*(w.x + b)))``
with an unregularised bias. The solver is dual coordinate descent over a
seeded permutation of the rows each epoch. The bias is ``b0 + beta``
where ``beta`` rides along as an extra constant feature of value 1 and so
carries a proximal ``0.5*beta^2`` penalty; after every epoch the centre
``b0`` absorbs ``beta``. At the fixed point ``sum(alpha*y) = 0``, so the
unregularised problem is solved exactly. Reported iterates use the exact
hinge-minimising ``b`` for their ``w``. The model returned is the best
epoch-end iterate by primal objective, so the recorded objective never
increases.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numba
import numpy as np

from . import numerics
from .errors import EmptyClassInSplit, ShapeMismatch, SingleClassData

DEFAULT_EPOCHS = 50


@dataclass
class LinearSvmModel:
    w: np.ndarray
    b: float
    c_reg: float
    classes: tuple = (1, -1)
    objective_history: list = field(default_factory=list, repr=False)

    def decision(self, x):
        return np.asarray(x, dtype=np.float64) @ self.w + self.b

    def predict(self, x):
        pos, neg = self.classes
        return np.where(self.decision(x) > 0, pos, neg)


@dataclass
class MulticlassSvm:
    mode: str
    models: list
    n_classes: int

    def save(self, path):
        """JSON header at ``path``; weights as a CPT1 (K, D+1) tensor at ``path + '.bin'``."""
        header = {
            "format": "featrep-svm-1",
            "mode": self.mode,
            "n_classes": self.n_classes,
            "c_reg": [m.c_reg for m in self.models],
            "classes": [list(m.classes) for m in self.models],
        }
        wb = np.array([np.append(m.w, m.b) for m in self.models])
        numerics.save_tensor(str(path) + ".bin", wb)
        Path(path).write_text(numerics.dump_json(header) + "\n")

    @classmethod
    def load(cls, path):
        header = json.loads(Path(path).read_text())
        wb = numerics.load_tensor(str(path) + ".bin")
        models = [
            LinearSvmModel(row[:-1].copy(), float(row[-1]), c, tuple(cl))
            for row, c, cl in zip(wb, header["c_reg"], header["classes"])
        ]
        return cls(header["mode"], models, header["n_classes"])


def primal_objective(w, b, x, y, c_reg):
    """``0.5*||w||^2 + C * sum(hinge)``; broadcasts over the columns of ``w``."""
    margins = y * (x @ w + b)
    return 0.5 * np.sum(w * w, axis=0) + c_reg * np.sum(np.maximum(0.0, 1.0 - margins), axis=0)


def optimal_bias(scores, y):
    """Exact minimiser of ``sum(max(0, 1 - y*(s + b)))`` over ``b``.

    The objective is convex and piecewise linear with kinks at ``1 - s`` for
    positives and ``-1 - s`` for negatives; the midpoint of the minimising
    interval of kinks is returned.
    """
    pos = y > 0
    kinks = np.sort(np.concatenate([1.0 - scores[pos], -1.0 - scores[~pos]]))
    sp = np.sort(1.0 - scores[pos])
    sn = np.sort(-1.0 - scores[~pos])
    # positives contribute sum over {sp > b} of (sp - b); negatives sum over {sn < b} of (b - sn)
    cp = np.concatenate([[0.0], np.cumsum(sp[::-1])])[::-1]
    cn = np.concatenate([[0.0], np.cumsum(sn)])
    ip = np.searchsorted(sp, kinks, side="right")
    i_n = np.searchsorted(sn, kinks, side="left")
    f = (cp[ip] - kinks * (len(sp) - ip)) + (kinks * i_n - cn[i_n])
    best = f.min()
    tol = 1e-12 * max(1.0, abs(best))
    at = np.nonzero(f <= best + tol)[0]
    return 0.5 * (kinks[at[0]] + kinks[at[-1]])


@numba.njit(cache=True)
def _dcd_epoch(x, y, b0, c_reg, order, alpha, w, qii):
    """One pass of dual coordinate descent; ``w[-1]`` is the proximal bias offset.

    Returns the largest projected-gradient magnitude seen.
    """
    d = x.shape[1]
    worst = 0.0
    for i in order:
        dot = b0 + w[d]
        for k in range(d):
            dot += w[k] * x[i, k]
        g = y[i] * dot - 1.0
        a = alpha[i]
        if a <= 0.0:
            pg = min(g, 0.0)
        elif a >= c_reg:
            pg = max(g, 0.0)
        else:
            pg = g
        if abs(pg) > worst:
            worst = abs(pg)
        if pg == 0.0:
            continue
        na = min(max(a - g / qii[i], 0.0), c_reg)
        step = (na - a) * y[i]
        if step != 0.0:
            for k in range(d):
                w[k] += step * x[i, k]
            w[d] += step
            alpha[i] = na
    return worst


def _solve_one(x, y, c_reg, epochs, rng, tol=1e-6):
    n, d = x.shape
    qii = np.einsum("ij,ij->i", x, x) + 1.0
    alpha = np.zeros(n)
    wa = np.zeros(d + 1)
    b0 = 0.0
    best_w, best_b = np.zeros(d), optimal_bias(np.zeros(n), y)
    best_obj = float(primal_objective(best_w, best_b, x, y, c_reg))
    history = [best_obj]
    for _ in range(epochs):
        worst = _dcd_epoch(x, y, b0, c_reg, rng.permutation(n), alpha, wa, qii)
        w = wa[:d].copy()
        b = optimal_bias(x @ w, y)
        obj = float(primal_objective(w, b, x, y, c_reg))
        if obj < best_obj:
            best_w, best_b, best_obj = w, b, obj
        history.append(best_obj)
        b0 += wa[d]
        if worst < tol and abs(wa[d]) < tol:
            break
    return best_w, best_b, history


def _solve(x, ymat, c_reg, epochs, seed):
    """Solve the K binary problems given by the +-1 columns of ``ymat``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    out_w, out_b, hist = [], [], []
    for k in range(ymat.shape[1]):
        rng = numerics.fork_rng(seed, "svm", k)
        w, b, h = _solve_one(x, np.ascontiguousarray(ymat[:, k]), c_reg, epochs, rng)
        out_w.append(w)
        out_b.append(b)
        hist.append(h)
    return np.stack(out_w, axis=1), np.array(out_b), hist


def svm_train_binary(x, y=None, c_reg=1.0, epochs=DEFAULT_EPOCHS, seed=0, classes=(1, -1)):
    """Train one linear SVM. ``x`` may be a FeatureMatrix whose labels are +-1."""
    if y is None:
        x, y = x.values, x.labels
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"{x.shape} rows vs {y.shape} labels")
    if not np.all(np.abs(y) == 1):
        raise ValueError("binary labels must be +1 or -1")
    if np.all(y > 0) or np.all(y < 0):
        raise SingleClassData("binary SVM needs both classes")
    w, b, hist = _solve(x, y[:, None], c_reg, epochs, seed)
    return LinearSvmModel(w[:, 0], float(b[0]), c_reg, tuple(classes), hist[0])


def svm_train_multiclass(m, mode="one_vs_rest", c_reg=1.0, epochs=DEFAULT_EPOCHS, n_classes=None, seed=0):
    """One-vs-rest trains C problems; one-vs-one trains C(C-1)/2 pairwise problems."""
    x = np.asarray(m.values, dtype=np.float64)
    y = m.labels
    c = int(n_classes if n_classes is not None else y.max() + 1)
    if c < 2:
        raise SingleClassData("need at least two classes")
    present = np.bincount(y, minlength=c) > 0
    if mode == "one_vs_rest":
        if not present.all():
            raise EmptyClassInSplit(f"classes {np.nonzero(~present)[0].tolist()} have no rows")
        ymat = np.where(y[:, None] == np.arange(c)[None, :], 1.0, -1.0)
        w, b, hist = _solve(x, ymat, c_reg, epochs, seed)
        models = [LinearSvmModel(w[:, i].copy(), float(b[i]), c_reg, (i, -1), hist[i])
                  for i in range(c)]
    elif mode == "one_vs_one":
        models = []
        for i, j in combinations(range(c), 2):
            if not (present[i] and present[j]):
                raise EmptyClassInSplit(f"pair ({i}, {j}) is missing a class")
            rows = (y == i) | (y == j)
            yy = np.where(y[rows] == i, 1.0, -1.0)
            w, b, hist = _solve(x[rows], yy[:, None], c_reg, epochs, numerics.derive_seed(seed, "svm", i, j))
            models.append(LinearSvmModel(w[:, 0], float(b[0]), c_reg, (i, j), hist[0]))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return MulticlassSvm(mode, models, c)


def decision_matrix(model, rows):
    x = np.asarray(rows, dtype=np.float64)
    d = model.models[0].w.shape[0]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeMismatch(f"rows of width {x.shape[-1]} for models over {d} features")
    w = np.stack([mm.w for mm in model.models], axis=1)
    b = np.array([mm.b for mm in model.models])
    return x @ w + b


def svm_predict(model, rows):
    """OvR: argmax of decision values. OvO: pairwise majority vote, ties broken by
    summed margins in favour of each class, then by the lowest class id."""
    dec = decision_matrix(model, rows)
    if model.mode == "one_vs_rest":
        return dec.argmax(axis=1)
    n = dec.shape[0]
    votes = np.zeros((n, model.n_classes))
    margin = np.zeros((n, model.n_classes))
    for k, mm in enumerate(model.models):
        i, j = mm.classes
        win_i = dec[:, k] > 0
        votes[:, i] += win_i
        votes[:, j] += ~win_i
        margin[:, i] += dec[:, k]
        margin[:, j] -= dec[:, k]
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        top = np.flatnonzero(votes[r] == votes[r].max())
        if len(top) > 1:
            mt = margin[r, top]
            top = top[mt == mt.max()]
        out[r] = top[0]
    return out
