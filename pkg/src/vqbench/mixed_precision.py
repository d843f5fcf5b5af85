"""Outlier-aware mixed-bitwidth quantization for key-cache-style vectors.

The channels of a head are split once per dataset: the ``count`` channels
with the largest L2 norm across rows get a higher bitwidth, the rest a lower
one.  Each sub-vector is quantized independently by one of the shared codecs
(with its own rotation of sub-vector dimension) and stores a single scale
rounded to float16, so a vector costs exactly

    hi_bits * n_outlier + lo_bits * n_regular + 2 * 16   stored bits.

Zero sub-vectors store scale 0 and an all-zero code (padding is legitimate
input, not an error).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import rabitq as rq
from . import turboquant as tq
from .packing import pack_uint_rows, unpack_uint_rows
from .rotation import RotationSpec, sample_dense_rotation

SCALE_BITS_TOTAL = 32  # two float16 scales per vector

_codec_cache: dict[tuple, "MixedPrecisionCodec"] = {}


@dataclass(frozen=True)
class ChannelSplit:
    """Partition of [0, head_dim) into outlier and regular channel indices."""

    head_dim: int
    outlier_idx: np.ndarray  # sorted
    regular_idx: np.ndarray  # sorted complement

    def key(self) -> tuple:
        return (self.head_dim, tuple(int(i) for i in self.outlier_idx))


@dataclass
class MixedCode:
    hi_code: np.ndarray  # quantized outlier sub-vector (integer codes)
    lo_code: np.ndarray  # quantized regular sub-vector
    hi_scale: float  # stored with float16 semantics
    lo_scale: float
    quantizer_kind: str  # "rabitq" | "tq-mse"
    hi_bits: int
    lo_bits: int
    seed: int


def select_outlier_channels(keys, count: int) -> ChannelSplit:
    """Pick the ``count`` channels with the largest L2 norm over all rows.

    Ties are broken toward the lower channel index, so the split is a
    deterministic function of the data.
    """
    mat = np.ascontiguousarray(keys, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValueError("keys must be a non-empty 2-d matrix")
    d = mat.shape[1]
    if not 0 <= count <= d:
        raise ValueError(f"count must be in [0, {d}], got {count}")
    norms = np.linalg.norm(mat, axis=0)
    order = np.lexsort((np.arange(d), -norms))
    outliers = np.sort(order[:count])
    regular = np.sort(order[count:])
    return ChannelSplit(head_dim=d, outlier_idx=outliers, regular_idx=regular)


class _SubVectorCodec:
    """Quantize fixed-length sub-vectors with one codec at one bitwidth."""

    def __init__(self, dim: int, bits: int, kind: str, seed: int,
                 cache_dir=None, strategy: rq.RescaleStrategy | None = None):
        self.dim = dim
        self.bits = bits
        self.kind = kind
        self.rotation: RotationSpec | None = None
        if dim > 0:
            self.rotation = sample_dense_rotation(dim, seed)
        if kind == "rabitq":
            self.strategy = strategy if strategy is not None else rq.ExhaustiveCritical()
        elif kind == "tq-mse":
            self.codebook = tq.load_or_build_codebook(dim, bits, cache_dir) if dim >= 2 else None
            if dim == 1:
                raise ValueError("tq-mse sub-vectors need dimension >= 2")
        else:
            raise ValueError(f"unknown quantizer kind {kind!r}")

    def encode_rows(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (codes, float16-rounded scales) for each row."""
        n = rows.shape[0]
        if self.dim == 0:
            return np.zeros((n, 0), dtype=np.uint8), np.zeros(n)
        codes = np.zeros((n, self.dim), dtype=np.uint8)
        scales = np.zeros(n)
        live = np.linalg.norm(rows, axis=1) > 0.0
        if np.any(live):
            rotated = rows[live] @ self.rotation.matrix.T
            if self.kind == "rabitq":
                batch = rq.rabitq_quantize_batch(rotated, self.bits, self.strategy)
                codes[live] = batch.u
                scales[live] = batch.factor_mse
            else:
                batch = tq.tq_quantize_mse_batch(rotated, self.codebook)
                codes[live] = batch.indices
                scales[live] = batch.norms
        return codes, np.float16(scales).astype(np.float64)

    def decode_rows(self, codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
        if self.dim == 0:
            return np.zeros((codes.shape[0], 0))
        if self.kind == "rabitq":
            unit = codes.astype(np.float64) - rq.grid_offset(self.bits)
        else:
            unit = self.codebook.centroids[codes]
        return (scales[:, None] * unit) @ self.rotation.matrix


class MixedPrecisionCodec:
    """Gather / quantize / scatter pipeline for one channel split."""

    def __init__(self, split: ChannelSplit, hi_bits: int, lo_bits: int,
                 kind: str = "rabitq", seed: int = 0, cache_dir=None,
                 strategy: rq.RescaleStrategy | None = None):
        if not (isinstance(hi_bits, (int, np.integer)) and isinstance(lo_bits, (int, np.integer))):
            raise ValueError("bitwidths must be integers")
        if not hi_bits > lo_bits >= 1:
            raise ValueError(f"need hi_bits > lo_bits >= 1, got ({hi_bits}, {lo_bits})")
        self.split = split
        self.hi_bits = int(hi_bits)
        self.lo_bits = int(lo_bits)
        self.kind = kind
        self.seed = int(seed)
        self.hi = _SubVectorCodec(len(split.outlier_idx), self.hi_bits, kind, seed,
                                  cache_dir, strategy)
        self.lo = _SubVectorCodec(len(split.regular_idx), self.lo_bits, kind, seed + 1,
                                  cache_dir, strategy)

    def quantize_rows(self, rows) -> list[MixedCode]:
        mat = np.ascontiguousarray(rows, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != self.split.head_dim:
            raise ValueError(f"expected rows of length {self.split.head_dim}")
        hi_codes, hi_scales = self.hi.encode_rows(mat[:, self.split.outlier_idx])
        lo_codes, lo_scales = self.lo.encode_rows(mat[:, self.split.regular_idx])
        return [MixedCode(hi_code=hi_codes[i], lo_code=lo_codes[i],
                          hi_scale=float(hi_scales[i]), lo_scale=float(lo_scales[i]),
                          quantizer_kind=self.kind, hi_bits=self.hi_bits,
                          lo_bits=self.lo_bits, seed=self.seed)
                for i in range(mat.shape[0])]

    def reconstruct_rows(self, codes: list[MixedCode]) -> np.ndarray:
        n = len(codes)
        hi_codes = np.stack([c.hi_code for c in codes]) if n else np.zeros((0, self.hi.dim), np.uint8)
        lo_codes = np.stack([c.lo_code for c in codes]) if n else np.zeros((0, self.lo.dim), np.uint8)
        hi_scales = np.array([c.hi_scale for c in codes])
        lo_scales = np.array([c.lo_scale for c in codes])
        out = np.zeros((n, self.split.head_dim))
        out[:, self.split.outlier_idx] = self.hi.decode_rows(hi_codes, hi_scales)
        out[:, self.split.regular_idx] = self.lo.decode_rows(lo_codes, lo_scales)
        return out

    def quantize(self, x) -> MixedCode:
        v = np.ascontiguousarray(x, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("expected a 1-d vector")
        return self.quantize_rows(v[None, :])[0]

    def reconstruct(self, code: MixedCode) -> np.ndarray:
        return self.reconstruct_rows([code])[0]


def _codec_for(split: ChannelSplit, hi_bits: int, lo_bits: int, kind: str,
               seed: int, cache_dir=None) -> MixedPrecisionCodec:
    key = (split.key(), int(hi_bits), int(lo_bits), kind, int(seed))
    codec = _codec_cache.get(key)
    if codec is None:
        codec = MixedPrecisionCodec(split, hi_bits, lo_bits, kind, seed, cache_dir)
        _codec_cache[key] = codec
    return codec


def quantize_mixed(x, split: ChannelSplit, hi_bits: int, lo_bits: int,
                   kind: str = "rabitq", seed: int = 0, cache_dir=None) -> MixedCode:
    """Quantize one vector under a channel split (codecs are cached per split)."""
    return _codec_for(split, hi_bits, lo_bits, kind, seed, cache_dir).quantize(x)


def reconstruct_mixed(code: MixedCode, split: ChannelSplit, cache_dir=None) -> np.ndarray:
    """Decode both sub-vectors and scatter them back to their channels."""
    codec = _codec_for(split, code.hi_bits, code.lo_bits, code.quantizer_kind,
                       code.seed, cache_dir)
    return codec.reconstruct(code)


def effective_bitwidth(split: ChannelSplit, hi_bits: int, lo_bits: int,
                       scale_bits_total: int = SCALE_BITS_TOTAL) -> float:
    """Stored bits per vector (codes plus scales) divided by the head dim."""
    total = len(split.outlier_idx) * hi_bits + len(split.regular_idx) * lo_bits
    return (total + scale_bits_total) / split.head_dim


def serialize_mixed(code: MixedCode) -> bytes:
    """Byte-exact packing: both code streams (ceil-per-byte) plus two float16s."""
    hi = pack_uint_rows(code.hi_code[None, :], code.hi_bits).tobytes()
    lo = pack_uint_rows(code.lo_code[None, :], code.lo_bits).tobytes()
    return hi + lo + struct.pack("<2e", np.float16(code.hi_scale), np.float16(code.lo_scale))


def deserialize_mixed(blob: bytes, split: ChannelSplit, hi_bits: int, lo_bits: int,
                      kind: str = "rabitq", seed: int = 0) -> MixedCode:
    n_hi = len(split.outlier_idx)
    n_lo = len(split.regular_idx)
    hi_bytes = (n_hi * hi_bits + 7) // 8
    lo_bytes = (n_lo * lo_bits + 7) // 8
    expect = hi_bytes + lo_bytes + 4
    if len(blob) != expect:
        raise ValueError(f"expected {expect} bytes, got {len(blob)}")
    hi_code = unpack_uint_rows(np.frombuffer(blob[:hi_bytes], np.uint8)[None, :], n_hi, hi_bits)[0]
    lo_code = unpack_uint_rows(
        np.frombuffer(blob[hi_bytes:hi_bytes + lo_bytes], np.uint8)[None, :], n_lo, lo_bits)[0]
    hi_scale, lo_scale = struct.unpack("<2e", blob[-4:])
    return MixedCode(hi_code=hi_code, lo_code=lo_code, hi_scale=float(hi_scale),
                     lo_scale=float(lo_scale), quantizer_kind=kind,
                     hi_bits=hi_bits, lo_bits=lo_bits, seed=seed)
