"""Shifted-grid multi-bit quantization with decoding-free inner-product estimation.

A vector is normalized, rescaled by a factor ``t``, and each coordinate is
rounded to the nearest point of the grid ``{i - (2^B - 1)/2 : i = 0..2^B-1}``;
the unsigned integers ``u`` are stored together with two scalar factors:

* ``factor_prod = |x| / |x_hat| / cos(x, x_hat)`` makes
  ``factor_prod * <x_hat, y>`` an unbiased estimate of ``<x, y>`` over the
  shared random rotation,
* ``factor_mse  = |x| / |x_hat| * cos(x, x_hat)`` makes
  ``factor_mse * x_hat`` the least-squares reconstruction of ``x``.

Here ``x_hat = u - (2^B - 1)/2`` is the grid representation of the code.
Inner products are estimated directly from ``u`` via
``<x_hat, y> = <u, y> - (2^B - 1)/2 * sum(y)``, so no per-code decode step is
needed and the per-query sum is shared across all codes.

Rounding ties (a rescaled coordinate exactly halfway between grid points)
round away from zero, with the zero midpoint itself rounding up; codes are
therefore deterministic functions of (vector, bits, t).
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateInputError, FormatError
from .packing import pack_bit_rows, unpack_bit_rows
from .rotation import (FastRotationSpec, GaussianSketch, RotationSpec,
                       apply_fast_rotation, apply_rotation)

RABITQ_MAGIC = b"RBQ1"

# Chunk budget (in scratch array elements) for the critical-factor sweep.
_SCAN_CHUNK_ELEMENTS = 1 << 21

# Internal seed for the expected-optimal-factor Monte Carlo table.
_EXPECTED_T_SEED = 0x5EEDFAC7
_expected_t_cache: dict[tuple[int, int, int], float] = {}
_expected_t_lock = threading.Lock()


# ---------------------------------------------------------------------------
# Rescale-factor strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExhaustiveCritical:
    """Sweep every rescale factor at which some coordinate changes its code
    and keep the one maximizing cosine similarity with the input."""


@dataclass(frozen=True)
class CandidateSet:
    """Evaluate only the given candidate rescale factors (all positive)."""

    candidates: tuple[float, ...]


@dataclass(frozen=True)
class ExpectedFactor:
    """Use the Monte Carlo mean of per-vector optimal factors over unit-sphere
    samples; one shared value per (dim, bits), cached."""

    samples: int = 4096


RescaleStrategy = ExhaustiveCritical | CandidateSet | ExpectedFactor


# ---------------------------------------------------------------------------
# Code containers
# ---------------------------------------------------------------------------


@dataclass
class RabitqCode:
    """One quantized vector: B-bit codes plus the two scalar factors."""

    u: np.ndarray  # (dim,) uint8, each < 2^bits
    bits: int
    dim: int
    factor_prod: float
    factor_mse: float
    well_aligned: bool = True


@dataclass
class RabitqBatch:
    """Column-oriented container for many codes of the same shape."""

    u: np.ndarray  # (n, dim) uint8
    factor_prod: np.ndarray  # (n,)
    factor_mse: np.ndarray  # (n,)
    bits: int
    well_aligned: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.u.shape[1]

    def __len__(self) -> int:
        return self.u.shape[0]

    def code(self, i: int) -> RabitqCode:
        aligned = True if self.well_aligned is None else bool(self.well_aligned[i])
        return RabitqCode(u=self.u[i].copy(), bits=self.bits, dim=self.dim,
                          factor_prod=float(self.factor_prod[i]),
                          factor_mse=float(self.factor_mse[i]),
                          well_aligned=aligned)


@dataclass
class QueryContext:
    """Everything precomputable once per query: the rotated query, its
    coordinate sum, and optionally its Gaussian sketch."""

    y: np.ndarray
    coord_sum: float
    sketch_y: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Grid arithmetic
# ---------------------------------------------------------------------------


def grid_offset(bits: int) -> float:
    return (2 ** bits - 1) / 2.0


def _check_bits(bits: int) -> int:
    if not isinstance(bits, (int, np.integer)) or not 1 <= int(bits) <= 8:
        raise ValueError(f"bits must be an integer in [1, 8], got {bits!r}")
    return int(bits)


def _round_to_grid(values: np.ndarray, bits: int) -> np.ndarray:
    """Round rescaled coordinates to the nearest grid code, clamping to the
    grid ends.  Ties round away from zero; the tie at exactly zero rounds up."""
    c = grid_offset(bits)
    shifted = values + c
    up = np.floor(shifted + 0.5)
    down = np.ceil(shifted - 0.5)
    codes = np.where(values >= 0.0, up, down)
    np.clip(codes, 0.0, 2 ** bits - 1, out=codes)
    return codes.astype(np.uint8)


def _alignment(xn_rows: np.ndarray, u: np.ndarray, bits: int):
    """Return (|x_hat| per row, cos(xn, x_hat) per row)."""
    xhat = u.astype(np.float64) - grid_offset(bits)
    hat_norm = np.linalg.norm(xhat, axis=1)
    cosine = np.einsum("nd,nd->n", xn_rows, xhat) / hat_norm
    return hat_norm, cosine


def _cosine_for_t(xn_rows: np.ndarray, t: np.ndarray, bits: int) -> np.ndarray:
    u = _round_to_grid(t[:, None] * xn_rows, bits)
    _, cosine = _alignment(xn_rows, u, bits)
    return cosine


# ---------------------------------------------------------------------------
# Rescale-factor selection
# ---------------------------------------------------------------------------


def _scan_chunk(a: np.ndarray, t_max: np.ndarray, k_last: int) -> np.ndarray:
    """Critical-factor sweep for a chunk of |xn| rows (k_last >= 1).

    Event m of a row is one coordinate crossing one rounding boundary as t
    grows; between events the code is constant, so cosine is evaluated once
    per interval via cumulative updates of <x_hat, xn> and |x_hat|^2.
    """
    m, d = a.shape
    ks = np.arange(1.0, k_last + 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        # zero or subnormal coordinates never cross a boundary: t = inf
        t_ev = (ks[None, None, :] / a[:, :, None]).reshape(m, -1)
    ds1 = np.broadcast_to(a[:, :, None], (m, d, k_last)).reshape(m, -1)
    ds2 = np.broadcast_to(2.0 * ks[None, None, :], (m, d, k_last)).reshape(m, -1)

    valid = t_ev <= t_max[:, None]
    t_ev = np.where(valid, t_ev, np.inf)
    order = np.argsort(t_ev, axis=1, kind="stable")
    t_s = np.take_along_axis(t_ev, order, axis=1)
    cum1 = np.take_along_axis(np.where(valid, ds1, 0.0), order, axis=1).cumsum(axis=1)
    cum2 = np.take_along_axis(np.where(valid, ds2, 0.0), order, axis=1).cumsum(axis=1)

    e = t_s.shape[1]
    zeros = np.zeros((m, 1))
    s1 = np.concatenate([zeros, cum1], axis=1) + (0.5 * a.sum(axis=1))[:, None]
    s2 = np.concatenate([zeros, cum2], axis=1) + 0.25 * d
    cosine = s1 / np.sqrt(s2)

    vcount = valid.sum(axis=1)
    pos = np.arange(e + 1)
    cosine[pos[None, :] > vcount[:, None]] = -np.inf
    if e > 1:
        # Zero-width intervals (duplicate event values) are unreachable by any t.
        zw = (pos[None, 1:e] < vcount[:, None]) & (t_s[:, 1:] == t_s[:, :-1])
        cosine[:, 1:e][zw] = -np.inf

    j = np.argmax(cosine, axis=1)
    jm1 = np.maximum(j - 1, 0)
    lo = np.where(j == 0, 0.0, np.take_along_axis(t_s, jm1[:, None], axis=1)[:, 0])
    hi_ev = np.take_along_axis(t_s, np.minimum(j, e - 1)[:, None], axis=1)[:, 0]
    hi = np.where(j < vcount, hi_ev, t_max)
    return 0.5 * (lo + hi)


def _scan_optimal_t(xn_rows: np.ndarray, bits: int) -> np.ndarray:
    """Per-row optimal rescale factor (representative of the argmax interval)."""
    a = np.abs(xn_rows)
    t_max = grid_offset(bits) / a.max(axis=1)
    k_last = (1 << (bits - 1)) - 1
    if k_last == 0:
        # One bit: the code is the sign pattern for every admissible t.
        return 0.5 * t_max
    out = np.empty(a.shape[0])
    step = max(1, _SCAN_CHUNK_ELEMENTS // (a.shape[1] * k_last))
    for lo in range(0, a.shape[0], step):
        hi = min(lo + step, a.shape[0])
        out[lo:hi] = _scan_chunk(a[lo:hi], t_max[lo:hi], k_last)
    return out


def _expected_optimal_t(dim: int, bits: int, samples: int) -> float:
    if samples < 1:
        raise ValueError("ExpectedFactor.samples must be >= 1")
    key = (dim, bits, samples)
    with _expected_t_lock:
        cached = _expected_t_cache.get(key)
        if cached is not None:
            return cached
        rng = np.random.Generator(np.random.PCG64(_EXPECTED_T_SEED))
        draws = rng.standard_normal((samples, dim))
        draws /= np.linalg.norm(draws, axis=1, keepdims=True)
        value = float(np.mean(_scan_optimal_t(draws, bits)))
        _expected_t_cache[key] = value
        return value


def _select_t_rows(xn_rows: np.ndarray, bits: int, strategy: RescaleStrategy) -> np.ndarray:
    n = xn_rows.shape[0]
    if isinstance(strategy, ExhaustiveCritical):
        return _scan_optimal_t(xn_rows, bits)
    if isinstance(strategy, CandidateSet):
        cands = tuple(float(t) for t in strategy.candidates)
        if not cands:
            raise ValueError("CandidateSet requires at least one candidate")
        if any(t <= 0.0 for t in cands):
            raise ValueError("candidate rescale factors must be positive")
        best_cos = np.full(n, -np.inf)
        best_t = np.empty(n)
        for t in cands:
            cosine = _cosine_for_t(xn_rows, np.full(n, t), bits)
            better = cosine > best_cos
            best_cos[better] = cosine[better]
            best_t[better] = t
        return best_t
    if isinstance(strategy, ExpectedFactor):
        return np.full(n, _expected_optimal_t(xn_rows.shape[1], bits, strategy.samples))
    raise ValueError(f"unknown rescale strategy {strategy!r}")


def select_rescale_factor(xn, bits: int, strategy: RescaleStrategy) -> float:
    """Pick the rescale factor for one unit vector under the given strategy."""
    bits = _check_bits(bits)
    v = np.ascontiguousarray(xn, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a 1-d unit vector")
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValueError("rescale-factor selection expects a unit vector")
    return float(_select_t_rows(v[None, :], bits, strategy)[0])


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def rabitq_quantize_batch(x_rows, bits: int,
                          strategy: RescaleStrategy = ExhaustiveCritical()) -> RabitqBatch:
    """Quantize each row of an already-rotated matrix."""
    bits = _check_bits(bits)
    mat = np.ascontiguousarray(x_rows, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a 2-d matrix of row vectors")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot quantize a zero vector")
    xn = mat / norms[:, None]
    t = _select_t_rows(xn, bits, strategy)
    u = _round_to_grid(t[:, None] * xn, bits)
    hat_norm, cosine = _alignment(xn, u, bits)
    with np.errstate(divide="ignore"):
        factor_prod = np.where(cosine != 0.0, norms / hat_norm / cosine, np.inf)
    factor_mse = norms / hat_norm * cosine
    return RabitqBatch(u=u, factor_prod=factor_prod, factor_mse=factor_mse,
                       bits=bits, well_aligned=cosine > 0.0)


def rabitq_quantize(x, bits: int,
                    strategy: RescaleStrategy = ExhaustiveCritical()) -> RabitqCode:
    """Quantize a single already-rotated vector (not necessarily normalized)."""
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a 1-d vector")
    return rabitq_quantize_batch(v[None, :], bits, strategy).code(0)


# ---------------------------------------------------------------------------
# Queries and estimation
# ---------------------------------------------------------------------------


def prepare_query(rotation: RotationSpec | FastRotationSpec, y_raw,
                  sketch: GaussianSketch | None = None) -> QueryContext:
    """Rotate a query once and precompute everything estimators reuse."""
    if isinstance(rotation, FastRotationSpec):
        y = apply_fast_rotation(rotation, y_raw)
    elif isinstance(rotation, RotationSpec):
        y = apply_rotation(rotation, y_raw)
    else:
        raise ValueError(f"unsupported rotation {rotation!r}")
    sketch_y = None
    if sketch is not None:
        if sketch.dim != y.shape[0]:
            raise ValueError(f"sketch dim {sketch.dim} != rotated query length {y.shape[0]}")
        sketch_y = sketch.entries @ y
    return QueryContext(y=y, coord_sum=float(np.sum(y)), sketch_y=sketch_y)


def rabitq_estimate_ip(code: RabitqCode, q: QueryContext) -> float:
    """Unbiased inner-product estimate straight from the stored integer codes."""
    if code.dim != q.y.shape[0]:
        raise ValueError(f"code dim {code.dim} != query length {q.y.shape[0]}")
    dot = float(code.u.astype(np.float64) @ q.y)
    return code.factor_prod * (dot - grid_offset(code.bits) * q.coord_sum)


def rabitq_estimate_incremental(code: RabitqCode, q: QueryContext,
                                split_bits: int) -> tuple[float, float]:
    """Coarse estimate from the top bit-planes, then the exact refinement.

    The coarse pass treats the unread low planes as their expected midpoint;
    the refined pass reassembles the full integer code from both plane groups
    and reruns the full estimator, so it is bit-identical to
    :func:`rabitq_estimate_ip`.
    """
    if not isinstance(split_bits, (int, np.integer)) or not 1 <= int(split_bits) < code.bits:
        raise ValueError(f"split_bits must be in [1, bits-1], got {split_bits!r}")
    split_bits = int(split_bits)
    low = code.bits - split_bits
    u_top = code.u >> low
    u_low = code.u & ((1 << low) - 1)
    scale = float(1 << low)
    mid = (scale - 1.0) / 2.0
    top_dot = float(u_top.astype(np.float64) @ q.y)
    coarse = code.factor_prod * (scale * top_dot + mid * q.coord_sum
                                 - grid_offset(code.bits) * q.coord_sum)
    reassembled = ((u_top.astype(np.uint16) << low) | u_low).astype(np.uint8)
    refined = rabitq_estimate_ip(replace(code, u=reassembled), q)
    return coarse, refined


def rabitq_reconstruct(code: RabitqCode) -> np.ndarray:
    """Least-squares reconstruction ``factor_mse * (u - (2^B - 1)/2)``."""
    return code.factor_mse * (code.u.astype(np.float64) - grid_offset(code.bits))


def rabitq_estimate_ip_many(batch: RabitqBatch, q: QueryContext,
                            factor: str = "prod") -> np.ndarray:
    """Estimate <x_i, y> for every code in a batch against one query."""
    if batch.dim != q.y.shape[0]:
        raise ValueError(f"batch dim {batch.dim} != query length {q.y.shape[0]}")
    dots = batch.u.astype(np.float64) @ q.y
    f = batch.factor_prod if factor == "prod" else batch.factor_mse
    return f * (dots - grid_offset(batch.bits) * q.coord_sum)


def rabitq_estimate_ip_rows(batch: RabitqBatch, y_rows: np.ndarray,
                            factor: str = "prod") -> np.ndarray:
    """Pairwise estimates: code i against query row i."""
    y = np.ascontiguousarray(y_rows, dtype=np.float64)
    if y.shape != batch.u.shape:
        raise ValueError(f"query rows shape {y.shape} != codes shape {batch.u.shape}")
    dots = np.einsum("nd,nd->n", batch.u.astype(np.float64), y)
    f = batch.factor_prod if factor == "prod" else batch.factor_mse
    return f * (dots - grid_offset(batch.bits) * y.sum(axis=1))


# ---------------------------------------------------------------------------
# Serialization: bit-plane-major code files
# ---------------------------------------------------------------------------


def pack_code_planes(u_rows: np.ndarray, bits: int) -> np.ndarray:
    """Pack codes plane-major: all MSBs first, each plane LSB-first in bytes.

    Plane-major layout keeps an incremental (top-planes-only) read contiguous.
    Returns an (n, bits * ceil(dim/8)) uint8 array.
    """
    n, d = u_rows.shape
    planes = [pack_bit_rows((u_rows >> (bits - 1 - p)) & 1) for p in range(bits)]
    return np.concatenate(planes, axis=1)


def unpack_code_planes(packed: np.ndarray, dim: int, bits: int) -> np.ndarray:
    per_plane = (dim + 7) // 8
    u = np.zeros((packed.shape[0], dim), dtype=np.uint8)
    for p in range(bits):
        plane = unpack_bit_rows(packed[:, p * per_plane:(p + 1) * per_plane], dim)
        u |= plane << (bits - 1 - p)
    return u


def write_rabitq_codes(path, batch: RabitqBatch) -> None:
    """File layout: magic, dim u32, bits u8, count u64, then per vector the two
    f32 factors followed by the bit-plane-packed code."""
    n, d = batch.u.shape
    packed = pack_code_planes(batch.u, batch.bits)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIBQ", RABITQ_MAGIC, d, batch.bits, n))
        factors = np.empty((n, 2), dtype="<f4")
        factors[:, 0] = batch.factor_prod
        factors[:, 1] = batch.factor_mse
        record = np.concatenate([factors.view(np.uint8).reshape(n, 8), packed], axis=1)
        f.write(record.tobytes())


def read_rabitq_codes(path) -> RabitqBatch:
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.calcsize("<4sIBQ")
    if len(blob) < head:
        raise FormatError("truncated code file header", offset=len(blob))
    magic, dim, bits, n = struct.unpack_from("<4sIBQ", blob, 0)
    if magic != RABITQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    per_plane = (dim + 7) // 8
    rec = 8 + bits * per_plane
    expect = head + n * rec
    if len(blob) != expect:
        raise FormatError(f"expected {expect} bytes, found {len(blob)}",
                          offset=min(len(blob), expect))
    body = np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(n, rec)
    factors = body[:, :8].copy().view("<f4").astype(np.float64)
    u = unpack_code_planes(body[:, 8:], dim, bits)
    return RabitqBatch(u=u, factor_prod=factors[:, 0], factor_mse=factors[:, 1], bits=bits)
