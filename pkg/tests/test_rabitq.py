import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import identity_rotation
from vqbench.errors import DegenerateInputError
from vqbench.rabitq import (CandidateSet, ExhaustiveCritical, ExpectedFactor,
                            grid_offset, prepare_query, rabitq_estimate_incremental,
                            rabitq_estimate_ip, rabitq_estimate_ip_rows,
                            rabitq_quantize, rabitq_quantize_batch,
                            rabitq_reconstruct, read_rabitq_codes,
                            select_rescale_factor, write_rabitq_codes)
from vqbench.rotation import GaussianSketch, sample_dense_rotation


def cosine_at(xn, t, bits):
    """Brute-force cosine oracle: round t*xn directly, no sweep machinery."""
    c = grid_offset(bits)
    v = t * xn
    shifted = v + c
    u = np.where(v >= 0.0, np.floor(shifted + 0.5), np.ceil(shifted - 0.5))
    u = np.clip(u, 0, 2 ** bits - 1)
    xhat = u - c
    return float(xn @ xhat / np.linalg.norm(xhat))


class TestQuantizeHandValues:
    def test_basis_vector_one_bit(self):
        code = rabitq_quantize([1.0, 0.0, 0.0, 0.0], 1)
        assert np.array_equal(code.u, [1, 1, 1, 1])
        assert code.factor_prod == pytest.approx(2.0, rel=1e-12)
        assert code.factor_mse == pytest.approx(0.5, rel=1e-12)

    def test_grid_direction_is_exact(self):
        code = rabitq_quantize([0.5, 0.5, 0.5, 0.5], 1)
        assert np.array_equal(code.u, [1, 1, 1, 1])
        assert code.factor_prod == pytest.approx(1.0, rel=1e-12)
        assert code.factor_mse == pytest.approx(1.0, rel=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateInputError):
            rabitq_quantize([0.0, 0.0], 1)

    def test_bits_out_of_range(self):
        for bits in (0, 9):
            with pytest.raises(ValueError):
                rabitq_quantize([1.0, 0.0], bits)

    def test_negative_scaling_is_mirrored(self):
        a = rabitq_quantize_batch(np.array([[0.3, -0.7, 0.1]]), 3).u[0]
        b = rabitq_quantize_batch(np.array([[-0.3, 0.7, -0.1]]), 3).u[0]
        assert np.array_equal(a.astype(int) + b.astype(int), np.full(3, 2 ** 3 - 1))


class TestRescaleFactor:
    def test_exhaustive_hits_grid_direction(self):
        xn = np.array([0.5, 0.5, 0.5, 0.5])
        t = select_rescale_factor(xn, 1, ExhaustiveCritical())
        assert cosine_at(xn, t, 1) == pytest.approx(1.0, rel=1e-12)

    def test_exhaustive_matches_brute_force_scan(self):
        # scan a dense grid of factors and compare the best achievable cosine
        rng = np.random.default_rng(4)
        for bits in (2, 3):
            for _ in range(5):
                xn = rng.standard_normal(8)
                xn /= np.linalg.norm(xn)
                t_opt = select_rescale_factor(xn, bits, ExhaustiveCritical())
                t_max = grid_offset(bits) / np.abs(xn).max()
                brute = max(cosine_at(xn, t, bits)
                            for t in np.linspace(1e-3 * t_max, t_max, 4000))
                assert cosine_at(xn, t_opt, bits) >= brute - 1e-9

    def test_single_candidate(self):
        xn = np.array([1.0, 0.0])
        assert select_rescale_factor(xn, 2, CandidateSet((1.0,))) == 1.0

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            select_rescale_factor(np.array([1.0, 0.0]), 2, CandidateSet(()))

    def test_nonpositive_candidates_rejected(self):
        with pytest.raises(ValueError):
            select_rescale_factor(np.array([1.0, 0.0]), 2, CandidateSet((0.5, -1.0)))

    def test_exhaustive_dominates_candidate_sets(self):
        rng = np.random.default_rng(99)
        bits = 3
        for _ in range(100):
            xn = rng.standard_normal(16)
            xn /= np.linalg.norm(xn)
            t_max = grid_offset(bits) / np.abs(xn).max()
            cands = tuple(np.linspace(0.1 * t_max, t_max, 8))
            t_ex = select_rescale_factor(xn, bits, ExhaustiveCritical())
            t_cd = select_rescale_factor(xn, bits, CandidateSet(cands))
            assert cosine_at(xn, t_ex, bits) >= cosine_at(xn, t_cd, bits) - 1e-12

    def test_expected_factor_cached_and_positive(self):
        a = select_rescale_factor(np.array([1.0, 0.0]) / 1.0, 2, ExpectedFactor(samples=64))
        b = select_rescale_factor(np.array([0.0, 1.0]), 2, ExpectedFactor(samples=64))
        assert a == b > 0.0

    def test_expected_factor_bad_samples(self):
        with pytest.raises(ValueError):
            select_rescale_factor(np.array([1.0, 0.0]), 2, ExpectedFactor(samples=0))

    def test_non_unit_input_rejected(self):
        with pytest.raises(ValueError):
            select_rescale_factor(np.array([2.0, 0.0]), 2, ExhaustiveCritical())


class TestQueryAndEstimation:
    def test_prepare_query_identity(self):
        q = prepare_query(identity_rotation(4), [1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(q.y, [1.0, 2.0, 3.0, 4.0])
        assert q.coord_sum == 10.0
        assert q.sketch_y is None

    def test_prepare_query_zero(self):
        q = prepare_query(identity_rotation(2), [0.0, 0.0])
        assert q.coord_sum == 0.0

    def test_prepare_query_identity_sketch(self):
        sketch = GaussianSketch(dim=2, seed=0, entries=np.eye(2))
        q = prepare_query(identity_rotation(2), [1.0, -1.0], sketch=sketch)
        assert np.array_equal(q.sketch_y, [1.0, -1.0])

    def test_prepare_query_dim_mismatch(self):
        with pytest.raises(ValueError):
            prepare_query(identity_rotation(3), [1.0, 2.0])

    def test_estimate_hand_values(self):
        code = rabitq_quantize([1.0, 0.0, 0.0, 0.0], 1)
        q1 = prepare_query(identity_rotation(4), [1.0, 0.0, 0.0, 0.0])
        assert rabitq_estimate_ip(code, q1) == pytest.approx(1.0, rel=1e-12)
        q2 = prepare_query(identity_rotation(4), [0.0, 1.0, 0.0, 0.0])
        assert rabitq_estimate_ip(code, q2) == pytest.approx(1.0, rel=1e-12)
        q0 = prepare_query(identity_rotation(4), [0.0, 0.0, 0.0, 0.0])
        assert rabitq_estimate_ip(code, q0) == 0.0

    def test_integer_path_matches_direct_path(self):
        rng = np.random.default_rng(0)
        batch = rabitq_quantize_batch(rng.standard_normal((200, 32)), 5)
        ys = rng.standard_normal((200, 32))
        got = rabitq_estimate_ip_rows(batch, ys)
        xhat = batch.u.astype(np.float64) - grid_offset(5)
        direct = batch.factor_prod * np.einsum("nd,nd->n", xhat, ys)
        np.testing.assert_allclose(got, direct, rtol=1e-5, atol=1e-12)

    def test_unbiased_over_rotations(self):
        """Mean error over fresh rotations of a fixed pair stays within 4 SE."""
        rng = np.random.default_rng(5)
        x = rng.standard_normal(64)
        y = rng.standard_normal(64)
        true_ip = float(x @ y)
        for bits in (1, 2, 4, 8):
            errs = []
            for s in range(200):
                rot = sample_dense_rotation(64, 40_000 + s)
                code = rabitq_quantize(rot.matrix @ x, bits,
                                       ExpectedFactor(samples=256))
                q = prepare_query(rot, y)
                errs.append(rabitq_estimate_ip(code, q) - true_ip)
            errs = np.asarray(errs)
            se = errs.std() / np.sqrt(len(errs))
            assert abs(errs.mean()) <= 4.0 * max(se, 1e-12), f"bits={bits}"

    def test_accuracy_improves_with_bits(self):
        """Error std strictly decreases from 1 to 8 bits (unit-vector pairs)."""
        rng = np.random.default_rng(11)
        xs = rng.standard_normal((2000, 128))
        xs /= np.linalg.norm(xs, axis=1, keepdims=True)
        ys = rng.standard_normal((2000, 128))
        ys /= np.linalg.norm(ys, axis=1, keepdims=True)
        rot = sample_dense_rotation(128, 2)
        xr = xs @ rot.matrix.T
        yr = ys @ rot.matrix.T
        truths = np.einsum("nd,nd->n", xs, ys)
        stds = []
        for bits in range(1, 9):
            batch = rabitq_quantize_batch(xr, bits, ExpectedFactor())
            est = rabitq_estimate_ip_rows(batch, yr)
            stds.append(np.std(est - truths))
        assert all(a > b for a, b in zip(stds, stds[1:])), stds


class TestIncremental:
    def test_refined_is_bit_identical(self):
        rng = np.random.default_rng(3)
        batch = rabitq_quantize_batch(rng.standard_normal((50, 16)), 4)
        rot = identity_rotation(16)
        for i in range(50):
            code = batch.code(i)
            q = prepare_query(rot, rng.standard_normal(16))
            full = rabitq_estimate_ip(code, q)
            for split in (1, 2, 3):
                _, refined = rabitq_estimate_incremental(code, q, split)
                assert refined == full  # exact, not approximate

    def test_coarse_gap_shrinks_with_more_planes(self):
        rng = np.random.default_rng(8)
        batch = rabitq_quantize_batch(rng.standard_normal((1000, 64)), 4)
        rot = identity_rotation(64)
        gaps = {1: [], 2: [], 3: []}
        for i in range(1000):
            q = prepare_query(rot, rng.standard_normal(64))
            code = batch.code(i)
            for split in (1, 2, 3):
                coarse, refined = rabitq_estimate_incremental(code, q, split)
                gaps[split].append(abs(coarse - refined))
        means = [np.mean(gaps[s]) for s in (1, 2, 3)]
        assert means[0] > means[1] > means[2]

    def test_split_bounds(self):
        code = rabitq_quantize([1.0, 2.0], 2)
        q = prepare_query(identity_rotation(2), [1.0, 1.0])
        for bad in (0, 2, 5):
            with pytest.raises(ValueError):
                rabitq_estimate_incremental(code, q, bad)


class TestReconstruction:
    def test_hand_values(self):
        code = rabitq_quantize([1.0, 0.0, 0.0, 0.0], 1)
        np.testing.assert_allclose(rabitq_reconstruct(code), [0.25] * 4, rtol=1e-12)
        exact = rabitq_quantize([0.5, 0.5, 0.5, 0.5], 1)
        np.testing.assert_allclose(rabitq_reconstruct(exact), [0.5] * 4, rtol=1e-12)

    def test_mse_factor_is_optimal(self):
        """Scaling the stored factor by 0.9 or 1.1 must increase squared error."""
        rng = np.random.default_rng(21)
        for _ in range(100):
            x = rng.standard_normal(24)
            code = rabitq_quantize(x, 3)
            xhat = code.u.astype(np.float64) - grid_offset(3)
            best = np.sum((x - code.factor_mse * xhat) ** 2)
            for wobble in (0.9, 1.1):
                worse = np.sum((x - wobble * code.factor_mse * xhat) ** 2)
                assert worse > best


class TestInvariants:
    @settings(max_examples=40, deadline=None)
    @given(bits=st.integers(1, 8),
           x=arrays(np.float64, st.integers(1, 24),
                    elements=st.floats(-100, 100, allow_nan=False)))
    def test_code_invariants(self, bits, x):
        if np.linalg.norm(x) == 0.0:
            return
        code = rabitq_quantize(x, bits)
        assert np.all(code.u < 2 ** bits)
        xhat = code.u.astype(np.float64) - grid_offset(bits)
        hat_sq = float(xhat @ xhat)
        norm_sq = float(np.asarray(x, dtype=np.float64) @ np.asarray(x, dtype=np.float64))
        if np.isfinite(code.factor_prod):
            assert code.factor_prod * code.factor_mse == pytest.approx(
                norm_sq / hat_sq, rel=1e-6)
        assert code.well_aligned  # away-from-zero rounding keeps cos > 0

    def test_batch_matches_single(self):
        rng = np.random.default_rng(17)
        rows = rng.standard_normal((20, 12))
        batch = rabitq_quantize_batch(rows, 4)
        for i in (0, 7, 19):
            single = rabitq_quantize(rows[i], 4)
            assert np.array_equal(single.u, batch.u[i])
            assert single.factor_prod == batch.factor_prod[i]


class TestCodeFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        batch = rabitq_quantize_batch(rng.standard_normal((37, 19)), 3)
        path = tmp_path / "codes.rbq"
        write_rabitq_codes(path, batch)
        loaded = read_rabitq_codes(path)
        assert np.array_equal(loaded.u, batch.u)
        # factors round-trip through f32 storage
        np.testing.assert_allclose(loaded.factor_prod, batch.factor_prod, rtol=1e-6)
        np.testing.assert_allclose(loaded.factor_mse, batch.factor_mse, rtol=1e-6)

    def test_plane_major_layout(self, tmp_path):
        # the first ceil(D/8) bytes of a one-vector record's code section hold
        # the most significant bits of every coordinate
        batch = rabitq_quantize_batch(np.array([[0.9, -0.1, 0.2, -0.8]]), 2)
        path = tmp_path / "one.rbq"
        write_rabitq_codes(path, batch)
        blob = path.read_bytes()
        code_section = blob[17 + 8:]
        msb_plane = np.unpackbits(np.frombuffer(code_section[:1], np.uint8),
                                  bitorder="little")[:4]
        assert np.array_equal(msb_plane, (batch.u[0] >> 1) & 1)
