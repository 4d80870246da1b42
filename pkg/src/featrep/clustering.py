"""Class centroids in feature space and agglomerative dendrograms over them."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics
from .errors import BadSubset, MissingClass

LINKAGES = ("single", "complete", "average")


@dataclass
class CentroidSet:
    centroids: np.ndarray
    class_names: list
    layer_index: int = 0
    counts: np.ndarray = None

    @property
    def n_classes(self):
        return self.centroids.shape[0]

    def save(self, path):
        numerics.save_tensor(path, self.centroids)
        meta = {"class_names": list(self.class_names), "layer_index": int(self.layer_index),
                "counts": [int(c) for c in self.counts]}
        Path(str(path) + ".json").write_text(numerics.dump_json(meta) + "\n")


@dataclass
class Dendrogram:
    """Merges are ``(node_a, node_b, height, new_node)`` with ``node_a < node_b``.

    Leaves are nodes ``0 .. C-1``; the merge at step ``s`` creates node ``C + s``.
    """

    merges: list
    labels: list = field(default_factory=list)

    @property
    def n_leaves(self):
        return len(self.merges) + 1


def centroids(m, n_classes=None, class_names=None):
    """Per-class mean of the rows of a FeatureMatrix."""
    y = m.labels
    c = int(n_classes if n_classes is not None else (y.max() + 1 if len(y) else 0))
    counts = np.bincount(y, minlength=c)
    if c == 0 or np.any(counts == 0):
        raise MissingClass(f"classes without rows: {np.nonzero(counts == 0)[0].tolist()}")
    sums = np.zeros((c, m.values.shape[1]))
    np.add.at(sums, y, m.values)
    names = list(class_names) if class_names is not None else [str(i) for i in range(c)]
    return CentroidSet(sums / counts[:, None], names, m.layer_index, counts)


def max_normalize(cs):
    """Divide every feature by its largest absolute centroid value (all-zero features stay 0)."""
    peak = np.abs(cs.centroids).max(axis=0)
    peak[peak == 0] = 1.0
    return CentroidSet(cs.centroids / peak, cs.class_names, cs.layer_index, cs.counts)


def agglomerate(cs, linkage="average"):
    """Agglomerative clustering with Euclidean distances and Lance-Williams updates.

    At each step the closest pair of active clusters merges; ties go to the
    lexicographically smallest pair of node ids.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    x = np.asarray(cs.centroids if isinstance(cs, CentroidSet) else cs, dtype=np.float64)
    c = x.shape[0]
    labels = list(cs.class_names) if isinstance(cs, CentroidSet) else [str(i) for i in range(c)]
    if c < 2:
        raise ValueError("need at least two centroids")
    dist = numerics.pairwise_distances(x)
    active = list(range(c))
    node_of = list(range(c))  # slot -> node id
    size = [1] * c
    merges = []
    for step in range(c - 1):
        best = None
        for ai, i in enumerate(active):
            for j in active[ai + 1:]:
                key = (dist[i, j], min(node_of[i], node_of[j]), max(node_of[i], node_of[j]))
                if best is None or key < best[0]:
                    best = (key, i, j)
        (h, na, nb), i, j = best
        for l in active:
            if l in (i, j):
                continue
            if linkage == "single":
                d = min(dist[i, l], dist[j, l])
            elif linkage == "complete":
                d = max(dist[i, l], dist[j, l])
            else:
                d = (size[i] * dist[i, l] + size[j] * dist[j, l]) / (size[i] + size[j])
            dist[i, l] = dist[l, i] = d
        size[i] += size[j]
        node_of[i] = c + step
        active.remove(j)
        merges.append((na, nb, float(h), c + step))
    return Dendrogram(merges, labels)


_UNSAFE = re.compile(r"[\s(),:;'\[\]]")


def _newick_label(name):
    if _UNSAFE.search(name):
        return "'" + name.replace("'", "''") + "'"
    return name


def to_newick(d):
    """Newick string; a node sits at half its merge distance, so leaf-to-leaf
    path lengths equal merge distances. Branch lengths are depth differences."""
    c = d.n_leaves
    labels = d.labels or [str(i) for i in range(c)]
    depth = [0.0] * c + [m[2] / 2.0 for m in d.merges]
    children = {m[3]: (m[0], m[1]) for m in d.merges}

    def render(node, parent_depth):
        if node < c:
            body = _newick_label(labels[node])
        else:
            a, b = children[node]
            body = f"({render(a, depth[node])},{render(b, depth[node])})"
        if parent_depth is None:
            return body
        return f"{body}:{_fmt(parent_depth - depth[node])}"

    root = d.merges[-1][3] if d.merges else 0
    return render(root, None) + ";"


def _fmt(x):
    return repr(float(x))


def write_newick(d, path):
    Path(path).write_text(to_newick(d) + "\n")


def write_merge_csv(d, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "node_a", "node_b", "height", "new_id"])
        for step, (a, b, h, new) in enumerate(d.merges):
            w.writerow([step, a, b, _fmt(h), new])


def read_merge_csv(path, labels=None):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    merges = [(int(r["node_a"]), int(r["node_b"]), float(r["height"]), int(r["new_id"])) for r in rows]
    return Dendrogram(merges, list(labels) if labels else [])


def export_dendrogram(d, path, fmt="newick"):
    if fmt == "newick":
        write_newick(d, path)
    elif fmt == "csv":
        write_merge_csv(d, path)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def top_shared_features(cs, class_subset, k):
    """Features scoring highest in every class of ``class_subset``.

    Features are ranked by their minimum centroid value across the subset,
    descending; equal minima keep ascending feature order.
    """
    subset = list(class_subset)
    d = cs.centroids.shape[1]
    if not subset or any(not 0 <= int(i) < cs.n_classes for i in subset):
        raise BadSubset(f"invalid class subset {subset}")
    if not 1 <= k <= d:
        raise BadSubset(f"k must lie in 1..{d}, got {k}")
    floor = cs.centroids[np.asarray(subset, dtype=int)].min(axis=0)
    return [int(i) for i in np.argsort(-floor, kind="stable")[:k]]


def subtree_leaves(d, node):
    """Leaf ids under ``node``."""
    c = d.n_leaves
    children = {m[3]: (m[0], m[1]) for m in d.merges}
    out, stack = [], [node]
    while stack:
        n = stack.pop()
        if n < c:
            out.append(n)
        else:
            stack.extend(children[n])
    return sorted(out)
