"""Little-endian bit packing helpers shared by the code serializers."""

from __future__ import annotations

import numpy as np


def pack_bit_rows(bits: np.ndarray) -> np.ndarray:
    """Pack rows of 0/1 values into bytes, LSB-first within each byte."""
    if bits.ndim != 2:
        raise ValueError("expected a 2-d array of bits")
    return np.packbits(bits.astype(np.uint8, copy=False), axis=1, bitorder="little")


def unpack_bit_rows(packed: np.ndarray, n_bits: int) -> np.ndarray:
    """Inverse of pack_bit_rows; returns an (n, n_bits) array of 0/1 values."""
    out = np.unpackbits(packed, axis=1, bitorder="little")
    return out[:, :n_bits]


def pack_uint_rows(values: np.ndarray, width: int) -> np.ndarray:
    """Pack rows of unsigned integers into width-bit fields, LSB-first.

    Field j of a row occupies bit positions [j*width, (j+1)*width) of the
    row's bit stream; bytes fill least-significant bit first.
    """
    if not 0 <= width <= 8:
        raise ValueError("field width must be in [0, 8]")
    values = np.asarray(values, dtype=np.uint8)
    n, d = values.shape
    if width == 0 or d == 0:
        return np.zeros((n, 0), dtype=np.uint8)
    shifts = np.arange(width, dtype=np.uint8)
    bits = (values[:, :, None] >> shifts) & 1
    return pack_bit_rows(bits.reshape(n, d * width))


def unpack_uint_rows(packed: np.ndarray, count: int, width: int) -> np.ndarray:
    """Inverse of pack_uint_rows; returns an (n, count) uint8 array."""
    if not 0 <= width <= 8:
        raise ValueError("field width must be in [0, 8]")
    n = packed.shape[0]
    if width == 0 or count == 0:
        return np.zeros((n, count), dtype=np.uint8)
    bits = unpack_bit_rows(packed, count * width).reshape(n, count, width)
    shifts = np.arange(width, dtype=np.uint8)
    return (bits << shifts).sum(axis=-1, dtype=np.uint8)
