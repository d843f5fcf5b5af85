"""Seeded orthogonal transforms applied to every vector before quantization.

Three transform families:

* dense random rotations (QR-orthonormalized Gaussian matrices),
* fast rotations built from rounds of random sign flips followed by a
  normalized Walsh-Hadamard transform; inputs are zero-padded to the next
  power of two, which is an isometry, and downstream consumers treat the
  padded length as the working dimension,
* dense Gaussian sketch matrices used for one-bit residual sketching.

All randomness comes from NumPy's PCG64 generator (a publicly specified,
state-based PRNG), so a given (dim, seed) pair reproduces the same transform
bit-for-bit across runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

ROTATION_MAGIC = b"ROT1"
DENSE_KIND = 0
FAST_KIND = 1
DEFAULT_FWHT_ROUNDS = 3

_hadamard_cache: dict[int, np.ndarray] = {}


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _next_pow2(n: int) -> int:
    return 1 << max(0, n - 1).bit_length()


def _as_vector(x) -> np.ndarray:
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class RotationSpec:
    """Dense random rotation; ``matrix`` is (dim, dim) orthogonal, row-major."""

    dim: int
    seed: int
    matrix: np.ndarray


@dataclass(frozen=True)
class FastRotationSpec:
    """Sign-flip + normalized-FWHT rotation acting on zero-padded input."""

    dim: int
    padded_dim: int
    rounds: int
    sign_flips: np.ndarray  # (rounds, padded_dim), entries in {-1, +1}
    seed: int


@dataclass(frozen=True)
class GaussianSketch:
    """Dense matrix of i.i.d. standard normals used for sign sketches."""

    dim: int
    seed: int
    entries: np.ndarray


def sample_dense_rotation(dim: int, seed: int) -> RotationSpec:
    """Draw an approximately Haar-distributed orthogonal matrix.

    QR of a seeded Gaussian matrix, with the signs of R's diagonal fixed
    positive so the decomposition (and therefore the rotation) is unique.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    g = _rng(seed).standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return RotationSpec(dim=int(dim), seed=int(seed), matrix=q)


def apply_rotation(spec: RotationSpec, x) -> np.ndarray:
    v = _as_vector(x)
    if v.shape[0] != spec.dim:
        raise ValueError(f"vector length {v.shape[0]} != rotation dim {spec.dim}")
    return spec.matrix @ v


def sample_fast_rotation(dim: int, seed: int, rounds: int = DEFAULT_FWHT_ROUNDS) -> FastRotationSpec:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    padded = _next_pow2(dim)
    flips = _rng(seed).integers(0, 2, size=(rounds, padded)).astype(np.float64) * 2.0 - 1.0
    return FastRotationSpec(dim=int(dim), padded_dim=padded, rounds=int(rounds),
                            sign_flips=flips, seed=int(seed))


def _hadamard_matrix(n: int) -> np.ndarray:
    """Unnormalized Sylvester-ordered Hadamard matrix of size n (power of two)."""
    cached = _hadamard_cache.get(n)
    if cached is not None:
        return cached
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    _hadamard_cache[n] = h
    return h


def _fwht_rows(mat: np.ndarray) -> np.ndarray:
    """Normalized Walsh-Hadamard transform of each row.

    Uses the Kronecker factorization H_p = H_a (x) H_b: viewing each row as an
    (a, b) block, the transform is Ha @ block @ Hb, so both passes run as two
    large dense matmuls instead of log2(p) strided sweeps.
    """
    n, p = mat.shape
    if p == 1:
        return mat.copy()
    bits = p.bit_length() - 1
    a = 1 << ((bits + 1) // 2)
    b = p // a
    ha = _hadamard_matrix(a) * (1.0 / np.sqrt(a))
    hb = _hadamard_matrix(b) * (1.0 / np.sqrt(b))
    w = mat.reshape(n * a, b) @ hb
    wt = np.ascontiguousarray(w.reshape(n, a, b).transpose(0, 2, 1)).reshape(n * b, a)
    z = wt @ ha
    return np.ascontiguousarray(z.reshape(n, b, a).transpose(0, 2, 1)).reshape(n, p)


def apply_fast_rotation(spec: FastRotationSpec, x) -> np.ndarray:
    v = _as_vector(x)
    if v.shape[0] != spec.dim:
        raise ValueError(f"vector length {v.shape[0]} != rotation dim {spec.dim}")
    return _fast_rotate_rows(spec, v[None, :])[0]


if _HAVE_NUMBA:

    @numba.njit(parallel=True, cache=True)
    def _fwht_rounds_kernel(out, flips):  # pragma: no cover - exercised via wrapper
        n, p = out.shape
        rounds = flips.shape[0]
        inv = 1.0 / np.sqrt(p)
        for i in numba.prange(n):
            row = out[i]
            for r in range(rounds):
                for j in range(p):
                    row[j] *= flips[r, j]
                h = 1
                while h < p:
                    for start in range(0, p, 2 * h):
                        for j in range(start, start + h):
                            u = row[j]
                            v = row[j + h]
                            row[j] = u + v
                            row[j + h] = u - v
                    h *= 2
                for j in range(p):
                    row[j] *= inv


def _fast_rotate_rows(spec: FastRotationSpec, rows: np.ndarray) -> np.ndarray:
    n, d = rows.shape
    out = np.zeros((n, spec.padded_dim))
    out[:, :d] = rows
    if _HAVE_NUMBA and spec.padded_dim > 1:
        # Fused kernel: all rounds run on a row while it stays in cache.
        # Rows are independent, so the output never depends on thread count.
        _fwht_rounds_kernel(out, np.ascontiguousarray(spec.sign_flips))
        return out
    for r in range(spec.rounds):
        out *= spec.sign_flips[r]
        out = _fwht_rows(out)
    return out


def working_dim(transform: RotationSpec | FastRotationSpec) -> int:
    """Dimension of transformed vectors (padded for the fast path)."""
    if isinstance(transform, FastRotationSpec):
        return transform.padded_dim
    return transform.dim


def rotate_rows(transform: RotationSpec | FastRotationSpec, rows) -> np.ndarray:
    """Apply a transform to each row of a matrix."""
    mat = np.ascontiguousarray(rows, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {mat.shape}")
    if mat.shape[1] != transform.dim:
        raise ValueError(f"row length {mat.shape[1]} != rotation dim {transform.dim}")
    if isinstance(transform, FastRotationSpec):
        return _fast_rotate_rows(transform, mat)
    return mat @ transform.matrix.T


def sample_gaussian_sketch(dim: int, seed: int) -> GaussianSketch:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    entries = _rng(seed).standard_normal((dim, dim))
    return GaussianSketch(dim=int(dim), seed=int(seed), entries=entries)


def save_rotation(spec: RotationSpec | FastRotationSpec, path) -> None:
    """Write the small binary sidecar; dense matrices are regenerated from the
    seed on load, never stored."""
    with open(path, "wb") as f:
        if isinstance(spec, FastRotationSpec):
            f.write(struct.pack("<4sBIQI", ROTATION_MAGIC, FAST_KIND,
                                spec.dim, spec.seed, spec.rounds))
        else:
            f.write(struct.pack("<4sBIQ", ROTATION_MAGIC, DENSE_KIND, spec.dim, spec.seed))


def load_rotation(path) -> RotationSpec | FastRotationSpec:
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.calcsize("<4sBIQ")
    if len(blob) < head:
        raise FormatError("truncated rotation sidecar", offset=len(blob))
    magic, kind, dim, seed = struct.unpack_from("<4sBIQ", blob, 0)
    if magic != ROTATION_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if kind == DENSE_KIND:
        return sample_dense_rotation(dim, seed)
    if kind == FAST_KIND:
        if len(blob) < head + 4:
            raise FormatError("truncated fast-rotation sidecar", offset=len(blob))
        (rounds,) = struct.unpack_from("<I", blob, head)
        return sample_fast_rotation(dim, seed, rounds)
    raise FormatError(f"unknown rotation kind {kind}", offset=4)
