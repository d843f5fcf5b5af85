"""Dataset ingestion and synthetic data generation.

Two binary matrix formats are supported:

* ``.fvecs`` — repeated records of [dim: i32 LE][dim x f32 LE], the common
  ANN-benchmark layout; every record must declare the same dim,
* raw f32 — header magic ``MATF``, count (u64 LE), dim (u32 LE), then the
  row-major f32 payload.

Synthetic matrices come from NumPy's PCG64 generator and are bit-reproducible
from (n, dim, distribution, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MATF_MAGIC = b"MATF"
_MATF_HEADER = "<4sQI"

DISTRIBUTIONS = ("gaussian", "unit-sphere")


@dataclass(frozen=True)
class DatasetHandle:
    n: int
    dim: int
    source: str


def read_fvecs(path) -> np.ndarray:
    """Parse an .fvecs file into an (n, dim) float32 matrix."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0:
        raise FormatError("empty .fvecs file", offset=0)
    if len(blob) < 4:
        raise FormatError("truncated .fvecs header", offset=len(blob))
    dim = int(np.frombuffer(blob, dtype="<i4", count=1)[0])
    if dim < 1:
        raise FormatError(f"non-positive dimension {dim}", offset=0)
    record = 4 + 4 * dim
    if len(blob) % record != 0:
        raise FormatError("truncated .fvecs record",
                          offset=(len(blob) // record) * record)
    n = len(blob) // record
    as_int = np.frombuffer(blob, dtype="<i4").reshape(n, dim + 1)
    headers = as_int[:, 0]
    if np.any(headers != dim):
        bad = int(np.argmax(headers != dim))
        raise FormatError(f"record {bad} declares dim {int(headers[bad])}, expected {dim}",
                          offset=bad * record)
    return np.frombuffer(blob, dtype="<f4").reshape(n, dim + 1)[:, 1:].copy()


def write_fvecs(path, matrix) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    n, dim = mat.shape
    out = np.empty((n, dim + 1), dtype="<i4")
    out[:, 0] = dim
    out[:, 1:] = mat.view("<i4")
    with open(path, "wb") as f:
        f.write(out.tobytes())


def read_matf(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.calcsize(_MATF_HEADER)
    if len(blob) < head:
        raise FormatError("truncated raw-f32 header", offset=len(blob))
    magic, n, dim = struct.unpack_from(_MATF_HEADER, blob, 0)
    if magic != MATF_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    expect = head + 4 * n * dim
    if len(blob) != expect:
        raise FormatError(f"expected {expect} bytes, found {len(blob)}",
                          offset=min(len(blob), expect))
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(n, dim).copy()


def write_matf(path, matrix) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise ValueError("expected a 2-d matrix")
    with open(path, "wb") as f:
        f.write(struct.pack(_MATF_HEADER, MATF_MAGIC, mat.shape[0], mat.shape[1]))
        f.write(mat.tobytes())


def generate_synthetic(n: int, dim: int, distribution: str = "gaussian",
                       seed: int = 0) -> np.ndarray:
    """Seeded i.i.d. standard-normal rows, optionally normalized to the sphere."""
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be >= 1")
    if distribution not in DISTRIBUTIONS:
        raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
    rows = np.random.default_rng(seed).standard_normal((n, dim))
    if distribution == "unit-sphere":
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        rows /= norms
    return rows


def load_matrix(path) -> tuple[DatasetHandle, np.ndarray]:
    """Route a file to the right reader by extension (.fvecs else raw f32)."""
    name = str(path)
    if name.lower().endswith(".fvecs"):
        mat = read_fvecs(path)
    else:
        mat = read_matf(path)
    handle = DatasetHandle(n=mat.shape[0], dim=mat.shape[1], source=name)
    return handle, mat.astype(np.float64)
