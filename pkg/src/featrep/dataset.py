"""Labelled grayscale images: directory loading, resampling, splitting and a synthetic set."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import numerics
from .errors import BadParam, EmptyClass, UnreadableImage

# 25000 / 1500 / 3800 out of 30300 labelled samples
DEFAULT_FRACTIONS = (25000 / 30300, 1500 / 30300, 3800 / 30300)
IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass
class LabeledImage:
    pixels: np.ndarray
    class_id: int
    source_path: str | None = None


@dataclass
class SplitDataset:
    train: list
    validation: list
    test: list
    class_names: list = field(default_factory=list)

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def input_side(self):
        for part in (self.train, self.validation, self.test):
            if part:
                return part[0].pixels.shape[0]
        return 0

    def split(self, name):
        parts = {"train": self.train, "validation": self.validation, "val": self.validation, "test": self.test}
        if name in parts:
            return parts[name]
        if name in ("train+val", "train+validation"):
            return self.train + self.validation
        if name == "all":
            return self.train + self.validation + self.test
        raise BadParam(f"unknown split {name!r}")

    def arrays(self, name):
        """(N, side, side) float64 pixels and int64 labels of a split."""
        items = self.split(name)
        side = self.input_side
        x = np.stack([im.pixels for im in items]) if items else np.zeros((0, side, side))
        y = np.array([im.class_id for im in items], dtype=np.int64)
        return x.astype(np.float64, copy=False), y

    def write_manifest(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "class_id", "split"])
            for name in ("train", "validation", "test"):
                for i, im in enumerate(self.split(name)):
                    w.writerow([im.source_path or f"{name}/{i}", im.class_id, name])


def rescale_bilinear(img, side):
    """Resample to ``side`` x ``side`` with corner-aligned bilinear interpolation.

    Output pixel ``i`` samples the source at ``i * (n - 1) / (side - 1)``, so
    corners map to corners. Non-square inputs are stretched.
    """
    if side < 1:
        raise BadParam(f"side must be >= 1, got {side}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise BadParam(f"expected a 2-D image, got shape {img.shape}")
    if img.shape == (side, side):
        return img.copy()
    rows = _interp_matrix(img.shape[0], side)
    cols = _interp_matrix(img.shape[1], side)
    return np.clip(rows @ img @ cols.T, 0.0, 1.0)


def _interp_matrix(n_in, n_out):
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def read_image(path):
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                peak = 65535.0 if arr.max(initial=0) > 255 else 255.0
                return np.clip(arr / peak, 0.0, 1.0)
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def split_indices(n, fractions, rng):
    """Shuffle ``range(n)`` and cut it into train/validation/test by fraction."""
    _, f_val, f_test = fractions
    n_val = int(round(n * f_val))
    n_test = int(round(n * f_test))
    n_train = n - n_val - n_test
    if n_train < 0:
        raise BadParam(f"fractions {fractions} leave no room for training data")
    perm = rng.permutation(n)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def _split(images, class_names, fractions, rng):
    tr, va, te = split_indices(len(images), fractions, rng)
    pick = lambda idx: [images[i] for i in idx]
    return SplitDataset(pick(tr), pick(va), pick(te), list(class_names))


def load_directory(root, input_side, fractions=DEFAULT_FRACTIONS, seed=0):
    """Read ``root/<class_name>/*.png|*.pgm`` into a split dataset.

    Class ids follow sorted directory names; files are read in sorted path
    order before the seeded shuffle.
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise EmptyClass(f"no class directories under {root}")
    images = []
    for cid, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise EmptyClass(f"class directory {d} has no images")
        for f in files:
            px = rescale_bilinear(read_image(f), input_side)
            images.append(LabeledImage(px, cid, str(f)))
    return _split(images, [d.name for d in class_dirs], fractions, numerics.fork_rng(seed, "split"))


# ---------------------------------------------------------------- synthetic shapes

def _blob(u, v):
    return np.exp(-(u**2 / 0.18 + v**2 / 0.10))

def _ring(u, v):
    r = np.hypot(u, v)
    return np.exp(-((r - 0.55) / 0.09) ** 2)

def _bar(u, v):
    return _soft_box(u, 0.75) * _soft_box(v, 0.12)

def _cross(u, v):
    return np.maximum(_soft_box(u, 0.7) * _soft_box(v, 0.11), _soft_box(v, 0.7) * _soft_box(u, 0.11))

def _dots(u, v):
    out = np.zeros_like(u)
    for cu, cv in ((-0.45, -0.35), (0.35, -0.45), (0.0, 0.1), (-0.35, 0.5), (0.45, 0.4)):
        out = np.maximum(out, np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / 0.012))
    return out

def _membrane(u, v):
    r = np.hypot(u, v)
    arc = np.exp(-((r - 0.6) / 0.07) ** 2) * (v > -0.1)
    return np.maximum(arc, 0.35 * np.exp(-(u**2 + (v - 0.25) ** 2) / 0.08))

def _triangle(u, v):
    d = np.maximum(np.maximum(-v - 0.35, v * 0.5 + u * 0.866 - 0.35), v * 0.5 - u * 0.866 - 0.35)
    return 1.0 / (1.0 + np.exp(d / 0.04))

def _parallel(u, v):
    return np.maximum(_soft_box(u - 0.3, 0.09), _soft_box(u + 0.3, 0.09)) * _soft_box(v, 0.7)

def _tentacles(u, v):
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    body = np.exp(-(r / 0.28) ** 2)
    arms = (np.cos(5 * theta) > 0.85) * (r < 0.85) * (r > 0.2) * 0.9
    return np.maximum(body, arms)

def _square(u, v):
    m = np.maximum(np.abs(u), np.abs(v))
    return np.exp(-((m - 0.5) / 0.07) ** 2)

def _soft_box(t, half):
    return 1.0 / (1.0 + np.exp((np.abs(t) - half) / 0.04))


SHAPES = (
    ("blob", _blob), ("ring", _ring), ("bar", _bar), ("cross", _cross),
    ("dotted", _dots), ("membrane", _membrane), ("triangle", _triangle),
    ("parallel", _parallel), ("tentacled", _tentacles), ("square", _square),
)


def _render(fn, side, rng, scale_base, noise):
    angle = rng.uniform(0.0, 2 * np.pi)
    scale = scale_base * rng.uniform(0.75, 1.2)
    shift = rng.uniform(-0.22, 0.22, size=2)
    aspect = rng.uniform(0.85, 1.15)
    grid = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    x0, y0 = xx - shift[0], yy - shift[1]
    c, s = np.cos(angle), np.sin(angle)
    u = (c * x0 + s * y0) / (scale * aspect)
    v = (-s * x0 + c * y0) / (scale / aspect)
    img = rng.uniform(0.55, 1.0) * fn(u, v)
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(n_classes, per_class, side, rng, fractions=DEFAULT_FRACTIONS, noise=0.12):
    """Render a labelled set of rotated, shifted, scaled and noisy shapes.

    Classes cycle through ``SHAPES``; past the tenth class the shapes repeat
    at a smaller scale. ``rng`` may be a Generator or an integer seed.
    """
    if n_classes < 2:
        raise BadParam(f"need at least 2 classes, got {n_classes}")
    if per_class < 3:
        raise BadParam(f"per_class must be >= 3, got {per_class}")
    if not isinstance(rng, np.random.Generator):
        rng = numerics.fork_rng(int(rng), "synth")
    images, names = [], []
    for cid in range(n_classes):
        name, fn = SHAPES[cid % len(SHAPES)]
        tier = cid // len(SHAPES)
        names.append(name if tier == 0 else f"{name}_{tier}")
        scale_base = 0.55 * 0.8**tier
        for _ in range(per_class):
            images.append(LabeledImage(_render(fn, side, rng, scale_base, noise), cid))
    return _split(images, names, fractions, rng)
