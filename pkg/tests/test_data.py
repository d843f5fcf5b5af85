import struct

import numpy as np
import pytest

from vqbench.data import (generate_synthetic, load_matrix, read_fvecs, read_matf,
                          write_fvecs, write_matf)
from vqbench.errors import FormatError


class TestFvecs:
    def test_single_record(self, tmp_path):
        path = tmp_path / "one.fvecs"
        path.write_bytes(struct.pack("<i2f", 2, 1.0, 2.0))
        mat = read_fvecs(path)
        assert mat.shape == (1, 2)
        np.testing.assert_array_equal(mat, [[1.0, 2.0]])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.fvecs"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            read_fvecs(path)

    def test_round_trip_bit_identical(self, tmp_path):
        mat = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
        path = tmp_path / "rt.fvecs"
        write_fvecs(path, mat)
        np.testing.assert_array_equal(read_fvecs(path), mat)

    def test_truncated_record_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.fvecs"
        path.write_bytes(struct.pack("<i2f", 2, 1.0, 2.0) + struct.pack("<i", 2))
        with pytest.raises(FormatError) as err:
            read_fvecs(path)
        assert err.value.offset == 12

    def test_inconsistent_dims_report_offset(self, tmp_path):
        path = tmp_path / "mixed.fvecs"
        path.write_bytes(struct.pack("<i2f", 2, 1.0, 2.0)
                         + struct.pack("<i2f", 3, 1.0, 2.0))
        with pytest.raises(FormatError) as err:
            read_fvecs(path)
        assert err.value.offset == 12


class TestMatf:
    def test_round_trip(self, tmp_path):
        mat = np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32)
        path = tmp_path / "mat.bin"
        write_matf(path, mat)
        np.testing.assert_array_equal(read_matf(path), mat)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(FormatError) as err:
            read_matf(path)
        assert err.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(struct.pack("<4sQI", b"MATF", 2, 3) + bytes(8))
        with pytest.raises(FormatError):
            read_matf(path)

    def test_load_matrix_routes_by_extension(self, tmp_path):
        mat = np.ones((2, 2), dtype=np.float32)
        fpath = tmp_path / "a.fvecs"
        write_fvecs(fpath, mat)
        handle, loaded = load_matrix(fpath)
        assert handle.n == 2 and handle.dim == 2
        assert loaded.dtype == np.float64


class TestSynthetic:
    def test_unit_sphere_norms(self):
        mat = generate_synthetic(3, 4, "unit-sphere", seed=9)
        np.testing.assert_allclose(np.linalg.norm(mat, axis=1), 1.0, atol=1e-6)

    def test_reproducible(self):
        a = generate_synthetic(5, 6, "gaussian", seed=3)
        b = generate_synthetic(5, 6, "gaussian", seed=3)
        assert np.array_equal(a, b)

    def test_gaussian_coordinate_means(self):
        mat = generate_synthetic(10000, 128, "gaussian", seed=1)
        bound = 4.0 / np.sqrt(10000)
        assert np.all(np.abs(mat.mean(axis=0)) <= bound)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            generate_synthetic(0, 4, "gaussian", 0)
        with pytest.raises(ValueError):
            generate_synthetic(4, 4, "laplace", 0)
