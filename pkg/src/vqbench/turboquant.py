"""Lloyd-Max scalar codebooks over the sphere-coordinate marginal, plus the
one-bit Gaussian-sketch residual correction used for unbiased inner products.

After random rotation, each coordinate of a normalized vector follows the
marginal of a uniform point on the unit sphere, with density proportional to
``(1 - x^2)^((D-3)/2)`` on [-1, 1].  The reconstruction-oriented codec stores
the nearest-centroid index of every coordinate under a Lloyd-Max codebook for
that density, plus the vector norm.  The inner-product codec spends one bit
per dimension on the sign sketch ``q = sign(S r)`` of the residual
``r = x/|x| - x_bar`` (``S`` i.i.d. standard normal), which yields the
unbiased estimate

    <x, y> ~= |x| <x_bar, y> + sqrt(pi/2) * |x| |r| / D * <q, S y>.

``sign(0) = +1`` throughout, and coordinates exactly on a cell boundary go to
the upper cell, so codes are deterministic.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from filelock import FileLock
from scipy.special import betainc, betaincinv

from .errors import DegenerateInputError, FormatError
from .packing import pack_bit_rows, pack_uint_rows, unpack_bit_rows, unpack_uint_rows
from .rabitq import QueryContext
from .rotation import GaussianSketch, sample_gaussian_sketch

TQ_MSE_MAGIC = b"TQM1"
TQ_PROD_MAGIC = b"TQP1"
CODEBOOK_MAGIC = b"LMCB"

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 1000

# Density evaluations near |x| = 1 are clamped to |x| = 1 - _ENDPOINT_MARGIN
# when the exponent is negative (D = 2), keeping the returned value finite.
_ENDPOINT_MARGIN = 1e-12


# ---------------------------------------------------------------------------
# The coordinate marginal and its Lloyd-Max codebooks
# ---------------------------------------------------------------------------


def marginal_density(dim: int, x) -> np.ndarray | float:
    """Density of one coordinate of a uniform point on the unit sphere in R^dim."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(arr) > 1.0):
        raise ValueError("coordinate values must lie in [-1, 1]")
    exponent = (dim - 3) / 2.0
    log_norm = 0.5 * math.log(math.pi) + math.lgamma((dim - 1) / 2.0) - math.lgamma(dim / 2.0)
    if exponent == 0.0:  # dim == 3: the marginal is uniform
        out = np.full_like(arr, math.exp(-log_norm))
    else:
        vals = np.abs(arr)
        if exponent < 0.0:
            vals = np.minimum(vals, 1.0 - _ENDPOINT_MARGIN)
        with np.errstate(divide="ignore"):
            out = np.exp(exponent * np.log1p(-vals * vals) - log_norm)
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


@dataclass
class ScalarCodebook:
    """Sorted centroid table with midpoint cell boundaries."""

    dim_context: int
    bits: int
    centroids: np.ndarray  # (2^bits,), strictly increasing, in (-1, 1)
    boundaries: np.ndarray  # (2^bits - 1,) midpoints of adjacent centroids
    converged: bool = True


def marginal_cdf(dim: int, x) -> np.ndarray:
    """CDF of the coordinate marginal; (X+1)/2 is Beta((dim-1)/2, (dim-1)/2),
    so this is a regularized incomplete beta and exact at the endpoints."""
    a = (dim - 1) / 2.0
    return betainc(a, a, (np.asarray(x, dtype=np.float64) + 1.0) * 0.5)


def _marginal_first_moment_antideriv(dim: int, x) -> np.ndarray:
    """Antiderivative of u * density(u): -(1 - u^2)^a / (2 a Z), zero at u = +-1."""
    a = (dim - 1) / 2.0
    log_c = -(math.log(2.0 * a) + 0.5 * math.log(math.pi)
              + math.lgamma(a) - math.lgamma(a + 0.5))
    arr = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return -np.exp(a * np.log1p(-arr * arr) + log_c)


def build_lloydmax_codebook(dim: int, bits: int, tol: float = DEFAULT_TOL,
                            max_iter: int = DEFAULT_MAX_ITER) -> ScalarCodebook:
    """Lloyd iterations against the coordinate marginal with exact cell
    integrals (incomplete-beta masses, closed-form first moments).

    Initialized at the quantiles of the marginal CDF (equal-probability
    cells); each iteration replaces every centroid with the conditional mean
    of its cell and re-symmetrizes, so the result is deterministic.  If the
    maximum centroid movement never drops below ``tol`` the best iterate is
    returned with ``converged=False``.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if not 1 <= bits <= 8:
        raise ValueError("bits must be in [1, 8]")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    a = (dim - 1) / 2.0
    k = 1 << bits
    centroids = 2.0 * betaincinv(a, a, (np.arange(k) + 0.5) / k) - 1.0

    converged = False
    for _ in range(max_iter):
        edges = np.concatenate([[-1.0], 0.5 * (centroids[:-1] + centroids[1:]), [1.0]])
        cell_mass = np.diff(marginal_cdf(dim, edges))
        cell_moment = np.diff(_marginal_first_moment_antideriv(dim, edges))
        new = cell_moment / cell_mass
        new = 0.5 * (new - new[::-1])  # the marginal is even; keep exact symmetry
        delta = float(np.abs(new - centroids).max())
        centroids = new
        if delta < tol:
            converged = True
            break

    boundaries = 0.5 * (centroids[:-1] + centroids[1:])
    return ScalarCodebook(dim_context=int(dim), bits=int(bits), centroids=centroids,
                          boundaries=boundaries, converged=converged)


def quantizer_expected_squared_error(centroids, dim: int) -> float:
    """Expected squared coordinate error of a scalar quantizer under the
    marginal, from exact per-cell moments.

    Uses int x^2 f_D = M_D - ((dim-1)/dim) M_{D+2} per cell, where M_D is the
    cell mass under the dim-dimensional marginal.
    """
    cents = np.sort(np.asarray(centroids, dtype=np.float64))
    edges = np.concatenate([[-1.0], 0.5 * (cents[:-1] + cents[1:]), [1.0]])
    m0 = np.diff(marginal_cdf(dim, edges))
    m1 = np.diff(_marginal_first_moment_antideriv(dim, edges))
    m2 = m0 - ((dim - 1.0) / dim) * np.diff(marginal_cdf(dim + 2, edges))
    return float(np.sum(m2 - 2.0 * cents * m1 + cents ** 2 * m0))


# ---------------------------------------------------------------------------
# On-disk codebook cache
# ---------------------------------------------------------------------------


def _codebook_cache_path(cache_dir, dim, bits, tol) -> str:
    return os.path.join(cache_dir, f"lmcb_d{dim}_b{bits}_t{tol:.0e}.lmcb")


def write_codebook(path, codebook: ScalarCodebook) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIBI", CODEBOOK_MAGIC, codebook.dim_context,
                            codebook.bits, len(codebook.centroids)))
        f.write(codebook.centroids.astype("<f8").tobytes())


def read_codebook(path) -> ScalarCodebook:
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.calcsize("<4sIBI")
    if len(blob) < head:
        raise FormatError("truncated codebook file", offset=len(blob))
    magic, dim, bits, count = struct.unpack_from("<4sIBI", blob, 0)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    expect = head + 8 * count
    if len(blob) != expect:
        raise FormatError(f"expected {expect} bytes, found {len(blob)}",
                          offset=min(len(blob), expect))
    centroids = np.frombuffer(blob, dtype="<f8", count=count, offset=head).astype(np.float64)
    boundaries = 0.5 * (centroids[:-1] + centroids[1:])
    return ScalarCodebook(dim_context=dim, bits=bits, centroids=centroids,
                          boundaries=boundaries, converged=True)


def load_or_build_codebook(dim: int, bits: int, cache_dir=None,
                           tol: float = DEFAULT_TOL,
                           max_iter: int = DEFAULT_MAX_ITER) -> ScalarCodebook:
    """Build a codebook, reusing the on-disk cache when a directory is given.

    A file lock guards the build so concurrent processes produce the file
    once; the build itself is deterministic, so a lost race is harmless.
    """
    if cache_dir is None:
        return build_lloydmax_codebook(dim, bits, tol, max_iter)
    os.makedirs(cache_dir, exist_ok=True)
    path = _codebook_cache_path(cache_dir, dim, bits, tol)
    with FileLock(path + ".lock"):
        if os.path.exists(path):
            return read_codebook(path)
        codebook = build_lloydmax_codebook(dim, bits, tol, max_iter)
        if codebook.converged:  # only converged tables are worth reusing
            tmp = path + ".tmp"
            write_codebook(tmp, codebook)
            os.replace(tmp, path)
        return codebook


# ---------------------------------------------------------------------------
# Code containers
# ---------------------------------------------------------------------------


@dataclass
class TqMseCode:
    indices: np.ndarray  # (dim,) uint8 centroid indices
    norm: float
    bits: int


@dataclass
class TqMseBatch:
    indices: np.ndarray  # (n, dim) uint8
    norms: np.ndarray  # (n,)
    bits: int

    @property
    def dim(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]

    def code(self, i: int) -> TqMseCode:
        return TqMseCode(indices=self.indices[i].copy(), norm=float(self.norms[i]),
                         bits=self.bits)


@dataclass
class TqProdCode:
    base: TqMseCode | None  # (bits - 1)-bit first stage; absent when bits == 1
    sign_bits: np.ndarray  # (dim,) int8 in {-1, +1}
    norm: float
    residual_norm: float
    bits: int
    sketch_seed: int


@dataclass
class TqProdBatch:
    base: TqMseBatch | None
    sign_bits: np.ndarray  # (n, dim) int8
    norms: np.ndarray
    residual_norms: np.ndarray
    bits: int
    sketch_seed: int

    @property
    def dim(self) -> int:
        return self.sign_bits.shape[1]

    def __len__(self) -> int:
        return self.sign_bits.shape[0]

    def code(self, i: int) -> TqProdCode:
        base = self.base.code(i) if self.base is not None else None
        return TqProdCode(base=base, sign_bits=self.sign_bits[i].copy(),
                          norm=float(self.norms[i]),
                          residual_norm=float(self.residual_norms[i]),
                          bits=self.bits, sketch_seed=self.sketch_seed)


# ---------------------------------------------------------------------------
# Quantization and reconstruction
# ---------------------------------------------------------------------------


def _rows(x) -> np.ndarray:
    mat = np.ascontiguousarray(x, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("expected a 2-d matrix of row vectors")
    return mat


def tq_quantize_mse_batch(x_rows, codebook: ScalarCodebook) -> TqMseBatch:
    mat = _rows(x_rows)
    if mat.shape[1] != codebook.dim_context:
        raise ValueError(f"vector length {mat.shape[1]} != codebook dim "
                         f"{codebook.dim_context}")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot quantize a zero vector")
    xn = mat / norms[:, None]
    # side="right" sends boundary ties to the upper cell
    indices = np.searchsorted(codebook.boundaries, xn, side="right").astype(np.uint8)
    return TqMseBatch(indices=indices, norms=norms, bits=codebook.bits)


def tq_quantize_mse(x, codebook: ScalarCodebook) -> TqMseCode:
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a 1-d vector")
    return tq_quantize_mse_batch(v[None, :], codebook).code(0)


def tq_reconstruct(code: TqMseCode, codebook: ScalarCodebook) -> np.ndarray:
    if code.bits != codebook.bits:
        raise ValueError(f"code bits {code.bits} != codebook bits {codebook.bits}")
    return code.norm * codebook.centroids[code.indices]


def tq_quantize_prod_batch(x_rows, bits: int, codebook: ScalarCodebook | None,
                           sketch: GaussianSketch) -> TqProdBatch:
    """First stage at (bits - 1) bits, then a sign sketch of the residual.

    With ``bits == 1`` the first stage is empty (``x_bar = 0``) and the whole
    budget goes to the sketch; ``codebook`` must be None in that case.
    """
    mat = _rows(x_rows)
    if bits < 1:
        raise ValueError("bits must be >= 1")
    if bits == 1:
        if codebook is not None:
            raise ValueError("bits == 1 uses no first-stage codebook")
    else:
        if codebook is None or codebook.bits != bits - 1:
            got = None if codebook is None else codebook.bits
            raise ValueError(f"first-stage codebook must have {bits - 1} bits, got {got}")
    if sketch.dim != mat.shape[1]:
        raise ValueError(f"sketch dim {sketch.dim} != vector length {mat.shape[1]}")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot quantize a zero vector")
    xn = mat / norms[:, None]
    if bits == 1:
        base = None
        residual = xn
    else:
        base = tq_quantize_mse_batch(mat, codebook)
        residual = xn - codebook.centroids[base.indices]
    sketched = residual @ sketch.entries.T
    signs = np.where(sketched >= 0.0, 1, -1).astype(np.int8)
    return TqProdBatch(base=base, sign_bits=signs, norms=norms,
                       residual_norms=np.linalg.norm(residual, axis=1),
                       bits=int(bits), sketch_seed=sketch.seed)


def tq_quantize_prod(x, bits: int, codebook: ScalarCodebook | None,
                     sketch: GaussianSketch) -> TqProdCode:
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a 1-d vector")
    return tq_quantize_prod_batch(v[None, :], bits, codebook, sketch).code(0)


def _residual_coeff(norm, residual_norm, dim) -> float | np.ndarray:
    return math.sqrt(math.pi / 2.0) * norm * residual_norm / dim


def tq_estimate_ip_mse(code: TqMseCode, codebook: ScalarCodebook, q: QueryContext) -> float:
    if code.bits != codebook.bits:
        raise ValueError(f"code bits {code.bits} != codebook bits {codebook.bits}")
    if code.indices.shape[0] != q.y.shape[0]:
        raise ValueError(f"code dim {code.indices.shape[0]} != query length {q.y.shape[0]}")
    return code.norm * float(codebook.centroids[code.indices] @ q.y)


def tq_estimate_ip_prod(code: TqProdCode, codebook: ScalarCodebook | None,
                        sketch: GaussianSketch, q: QueryContext) -> float:
    if q.sketch_y is None:
        raise ValueError("query context has no sketch; prepare it with the sketch")
    if sketch.seed != code.sketch_seed:
        raise ValueError(f"sketch seed {sketch.seed} != code sketch seed {code.sketch_seed}")
    d = code.sign_bits.shape[0]
    if d != q.y.shape[0]:
        raise ValueError(f"code dim {d} != query length {q.y.shape[0]}")
    first = 0.0
    if code.base is not None:
        first = tq_estimate_ip_mse(code.base, codebook, q)
    corr = _residual_coeff(code.norm, code.residual_norm, d)
    return first + corr * float(code.sign_bits.astype(np.float64) @ q.sketch_y)


def tq_reconstruct_prod(code: TqProdCode, codebook: ScalarCodebook | None,
                        sketch: GaussianSketch) -> np.ndarray:
    if sketch.seed != code.sketch_seed:
        raise ValueError(f"sketch seed {sketch.seed} != code sketch seed {code.sketch_seed}")
    d = code.sign_bits.shape[0]
    if sketch.dim != d:
        raise ValueError(f"sketch dim {sketch.dim} != code dim {d}")
    if code.base is None:
        xbar = np.zeros(d)
    else:
        if codebook is None or codebook.bits != code.base.bits:
            raise ValueError("first-stage codebook missing or has wrong bit width")
        xbar = codebook.centroids[code.base.indices]
    correction = math.sqrt(math.pi / 2.0) * (code.residual_norm / d)
    return code.norm * (xbar + correction * (sketch.entries.T @ code.sign_bits.astype(np.float64)))


# Batch estimators used by the benchmark harness -----------------------------


def tq_estimate_ip_mse_many(batch: TqMseBatch, codebook: ScalarCodebook,
                            q: QueryContext) -> np.ndarray:
    decoded = codebook.centroids[batch.indices]
    return batch.norms * (decoded @ q.y)


def tq_estimate_ip_mse_rows(batch: TqMseBatch, codebook: ScalarCodebook,
                            y_rows: np.ndarray) -> np.ndarray:
    decoded = codebook.centroids[batch.indices]
    return batch.norms * np.einsum("nd,nd->n", decoded, y_rows)


def tq_estimate_ip_prod_many(batch: TqProdBatch, codebook: ScalarCodebook | None,
                             q: QueryContext) -> np.ndarray:
    if q.sketch_y is None:
        raise ValueError("query context has no sketch; prepare it with the sketch")
    d = batch.dim
    first = 0.0
    if batch.base is not None:
        first = tq_estimate_ip_mse_many(batch.base, codebook, q)
    coeff = _residual_coeff(batch.norms, batch.residual_norms, d)
    return first + coeff * (batch.sign_bits.astype(np.float64) @ q.sketch_y)


def tq_estimate_ip_prod_rows(batch: TqProdBatch, codebook: ScalarCodebook | None,
                             sketch: GaussianSketch, y_rows: np.ndarray) -> np.ndarray:
    d = batch.dim
    first = 0.0
    if batch.base is not None:
        first = tq_estimate_ip_mse_rows(batch.base, codebook, y_rows)
    sketched = y_rows @ sketch.entries.T
    coeff = _residual_coeff(batch.norms, batch.residual_norms, d)
    return first + coeff * np.einsum("nd,nd->n", batch.sign_bits.astype(np.float64), sketched)


# ---------------------------------------------------------------------------
# Code files
# ---------------------------------------------------------------------------


def write_tq_mse_codes(path, batch: TqMseBatch) -> None:
    n, d = batch.indices.shape
    packed = pack_uint_rows(batch.indices, batch.bits)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIBQ", TQ_MSE_MAGIC, d, batch.bits, n))
        norms = batch.norms.astype("<f4").view(np.uint8).reshape(n, 4)
        f.write(np.concatenate([norms, packed], axis=1).tobytes())


def read_tq_mse_codes(path) -> TqMseBatch:
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.calcsize("<4sIBQ")
    if len(blob) < head:
        raise FormatError("truncated code file header", offset=len(blob))
    magic, dim, bits, n = struct.unpack_from("<4sIBQ", blob, 0)
    if magic != TQ_MSE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    rec = 4 + (dim * bits + 7) // 8
    expect = head + n * rec
    if len(blob) != expect:
        raise FormatError(f"expected {expect} bytes, found {len(blob)}",
                          offset=min(len(blob), expect))
    body = np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(n, rec)
    norms = body[:, :4].copy().view("<f4").astype(np.float64).ravel()
    indices = unpack_uint_rows(body[:, 4:], dim, bits)
    return TqMseBatch(indices=indices, norms=norms, bits=bits)


def write_tq_prod_codes(path, batch: TqProdBatch) -> None:
    n, d = batch.sign_bits.shape
    base_width = batch.bits - 1
    if batch.base is not None:
        packed_idx = pack_uint_rows(batch.base.indices, base_width)
    else:
        packed_idx = np.zeros((n, 0), dtype=np.uint8)
    packed_signs = pack_bit_rows((batch.sign_bits > 0).astype(np.uint8))
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIBQQ", TQ_PROD_MAGIC, d, batch.bits, n, batch.sketch_seed))
        scalars = np.empty((n, 2), dtype="<f4")
        scalars[:, 0] = batch.norms
        scalars[:, 1] = batch.residual_norms
        f.write(np.concatenate([scalars.view(np.uint8).reshape(n, 8),
                                packed_idx, packed_signs], axis=1).tobytes())


def read_tq_prod_codes(path) -> TqProdBatch:
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.calcsize("<4sIBQQ")
    if len(blob) < head:
        raise FormatError("truncated code file header", offset=len(blob))
    magic, dim, bits, n, sketch_seed = struct.unpack_from("<4sIBQQ", blob, 0)
    if magic != TQ_PROD_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    base_width = bits - 1
    idx_bytes = (dim * base_width + 7) // 8 if base_width > 0 else 0
    sign_bytes = (dim + 7) // 8
    rec = 8 + idx_bytes + sign_bytes
    expect = head + n * rec
    if len(blob) != expect:
        raise FormatError(f"expected {expect} bytes, found {len(blob)}",
                          offset=min(len(blob), expect))
    body = np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(n, rec)
    scalars = body[:, :8].copy().view("<f4").astype(np.float64)
    base = None
    if base_width > 0:
        indices = unpack_uint_rows(body[:, 8:8 + idx_bytes], dim, base_width)
        base = TqMseBatch(indices=indices, norms=scalars[:, 0].copy(), bits=base_width)
    bit_rows = unpack_bit_rows(body[:, 8 + idx_bytes:], dim)
    signs = (bit_rows.astype(np.int8) * 2 - 1)
    return TqProdBatch(base=base, sign_bits=signs, norms=scalars[:, 0],
                       residual_norms=scalars[:, 1], bits=bits, sketch_seed=sketch_seed)


def sketch_for_codes(batch: TqProdBatch) -> GaussianSketch:
    """Regenerate the Gaussian sketch a prod-code batch was built with."""
    return sample_gaussian_sketch(batch.dim, batch.sketch_seed)
