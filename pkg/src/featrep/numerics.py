"""Dense array kernels, seeded random streams and the CPT1 binary format.

Arrays are plain numpy ``ndarray`` objects in C (row-major) order. The last
axis varies fastest; a (C, H, W) feature map flattens to index
``c * H * W + h * W + w``. Every module relies on this convention.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeMismatch

MAGIC = b"CPT1"
CONTAINER_MAGIC = b"CPTC"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}

# Named forks of the run seed. The index of a consumer never changes, so
# adding a new consumer cannot perturb existing streams.
FORK_ORDER = ("init", "dropout", "shuffle", "forest", "bagging", "svm", "synth", "split")


def tensor_reshape(t, new_shape):
    t = np.asarray(t)
    new_shape = tuple(int(s) for s in np.atleast_1d(new_shape))
    if int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise ShapeMismatch(f"cannot reshape {t.shape} into {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def matmul(a, b):
    """Matrix product of two rank-2 arrays, accumulated in float64."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.dot(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))


def euclidean_distance(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatch(f"length {a.size} vs {b.size}")
    d = a - b
    return float(np.sqrt(np.dot(d, d)))


def pairwise_distances(x):
    """Euclidean distance matrix between the rows of ``x`` (direct differences, no Gram trick)."""
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def check_finite(t, what="tensor", exc=NonFiniteError):
    if not np.all(np.isfinite(t)):
        raise exc(f"{what} contains NaN or Inf")
    return t


def float_dtype(precision):
    if precision in ("f64", np.float64):
        return np.float64
    if precision in ("f32", np.float32):
        return np.float32
    raise ValueError(f"unknown precision {precision!r}")


# ---------------------------------------------------------------- random streams

def make_rng(seed):
    """PCG64 generator; the stream for a given seed is identical on every platform."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def fork_rng(seed, consumer, *index):
    """Independent stream for ``consumer`` (a name in ``FORK_ORDER``).

    Extra integers select sub-streams, e.g. ``fork_rng(seed, "forest", tree)``.
    """
    key = (FORK_ORDER.index(consumer),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, consumer, *index):
    """A 63-bit integer seed drawn from a forked stream."""
    return int(fork_rng(seed, consumer, *index).integers(0, 2**63 - 1))


def rng_state(rng):
    return rng.bit_generator.state


def rng_from_state(state):
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


# ---------------------------------------------------------------- CPT1 files

def write_tensor(fh, t):
    """Write one CPT1 record: magic, u32 rank, u64 extents, u8 dtype, LE payload."""
    t = np.asarray(t)
    if t.dtype not in _DTYPE_CODES:
        t = t.astype(np.float64)
    code = _DTYPE_CODES[t.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    fh.write(struct.pack("<B", code))
    fh.write(np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh):
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("bad magic, expected CPT1")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    if rank > 32:
        raise FormatError(f"implausible rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    (code,) = struct.unpack("<B", _read_exact(fh, 1))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, t):
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path):
    with open(path, "rb") as fh:
        t = read_tensor(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after tensor")
    return t


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_container(path, header, tensors):
    """Named tensors behind a JSON header.

    Layout: ``CPTC``, u32 header length, UTF-8 JSON header whose ``tensors``
    key lists the record names in order, then one CPT1 record per name.
    """
    names = list(tensors)
    header = dict(header, tensors=names)
    blob = dump_json(header).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name in names:
        write_tensor(buf, tensors[name])
    Path(path).write_bytes(buf.getvalue())


def load_container(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CONTAINER_MAGIC:
            raise FormatError("bad magic, expected CPTC")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt header: {exc}") from exc
        tensors = {name: read_tensor(fh) for name in header.get("tensors", [])}
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor")
    return header, tensors
