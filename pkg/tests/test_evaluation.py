import math

import numpy as np
import pytest

from vqbench.evaluation import (TheoryParams, bench_quantize, brute_force_topk,
                                chebyshev_tail_check, ip_error_stats,
                                make_pipeline, optimal_bitwidth_reference,
                                recall_at_1_at_k, run_recall_experiment)
from vqbench.rabitq import ExpectedFactor


class TestErrorStats:
    def test_hand_values(self):
        stats = ip_error_stats([-1.0, 0.0, 1.0], [0.0, 0.0, 0.0])
        assert stats.mean == 0.0
        assert stats.std == pytest.approx(math.sqrt(2.0 / 3.0), rel=1e-12)
        assert stats.max_abs == 1.0
        assert stats.count == 3

    def test_exact_estimates(self):
        stats = ip_error_stats([1.0, 2.0], [1.0, 2.0])
        assert stats.mean == stats.std == stats.max_abs == 0.0
        assert all(v == 0.0 for _, v in stats.quantiles)

    def test_single_element(self):
        stats = ip_error_stats([2.5], [1.0])
        assert stats.mean == 1.5 and stats.std == 0.0 and stats.max_abs == 1.5

    def test_quantiles_monotone(self):
        rng = np.random.default_rng(0)
        stats = ip_error_stats(rng.standard_normal(500), np.zeros(500))
        values = [v for _, v in stats.quantiles]
        assert values == sorted(values)

    def test_errors(self):
        with pytest.raises(ValueError):
            ip_error_stats([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            ip_error_stats([], [])


class TestBruteForceTopk:
    def test_basis(self):
        base = np.eye(3)
        assert list(brute_force_topk(base, np.array([0.0, 1.0, 0.0]), 1)) == [1]

    def test_full_permutation(self):
        base = np.array([[1.0], [3.0], [2.0]])
        assert list(brute_force_topk(base, np.array([1.0]), 3)) == [1, 2, 0]

    def test_tie_breaks_to_lower_id(self):
        base = np.array([[1.0], [1.0], [2.0]])
        assert list(brute_force_topk(base, np.array([1.0]), 3)) == [2, 0, 1]

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            brute_force_topk(np.eye(2), np.array([1.0, 0.0]), 3)


class TestRecall:
    def test_exact_lists_give_one(self):
        assert recall_at_1_at_k([0, 1], [[0, 9], [1, 9]], 1) == 1.0

    def test_partial_hits(self):
        got = recall_at_1_at_k([0, 1, 2], [[0, 5, 6, 7], [9, 9, 9, 9], [1, 2, 3, 4]], 4)
        assert got == pytest.approx(2.0 / 3.0, abs=1e-9)

    def test_nested_in_k(self):
        exact = [3, 1]
        lists = [[5, 3, 0, 9], [1, 0, 2, 4]]
        values = [recall_at_1_at_k(exact, lists, k) for k in (1, 2, 3, 4)]
        assert values == sorted(values)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            recall_at_1_at_k([], [], 1)

    def test_short_list_rejected(self):
        with pytest.raises(ValueError):
            recall_at_1_at_k([0], [[0]], 2)


class TestChebyshev:
    def test_formula(self):
        rng = np.random.default_rng(1)
        errors = rng.normal(0.0, 0.1, size=20000)
        report = chebyshev_tail_check(errors, [0.5])
        t, tail, bound = report[0]
        assert bound == pytest.approx(errors.var() / 0.25, rel=1e-6)
        assert tail == 0.0  # 5 sigma

    def test_all_zero_errors(self):
        report = chebyshev_tail_check(np.zeros(10), [0.5, 1.0])
        for _, tail, bound in report:
            assert tail == 0.0 and bound == 0.0

    def test_bound_dominates_even_for_biased_samples(self):
        """In-sample Chebyshev on centered errors is a deterministic
        inequality, so it must hold for any sample, biased included."""
        rng = np.random.default_rng(2)
        samples = [
            rng.normal(0.0, 0.05, size=4000),
            rng.normal(0.3, 0.02, size=4000),  # strongly biased
            rng.standard_cauchy(size=1000),    # heavy tails
        ]
        for errors in samples:
            sigma = np.std(errors)
            ts = sigma * np.array([0.5, 1.0, 2.0, 4.0, 8.0])
            ts = ts[ts > 0]
            for t, tail, bound in chebyshev_tail_check(errors, ts):
                assert tail <= bound * 1.05 + 2.0 / np.sqrt(len(errors))

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            chebyshev_tail_check([np.nan, np.inf], [1.0])
        with pytest.raises(ValueError):
            chebyshev_tail_check([1.0, -1.0], [0.0])


class TestOptimalBitwidthReference:
    def test_unit_case(self):
        assert optimal_bitwidth_reference(
            TheoryParams(eps=1.0, delta=math.exp(-1.0), dim=1)) == pytest.approx(0.0)

    def test_halving_eps_adds_two(self):
        a = optimal_bitwidth_reference(TheoryParams(eps=0.2, delta=1e-3, dim=64))
        b = optimal_bitwidth_reference(TheoryParams(eps=0.1, delta=1e-3, dim=64))
        assert b - a == pytest.approx(2.0, rel=1e-12)

    def test_reference_value(self):
        got = optimal_bitwidth_reference(TheoryParams(eps=0.1, delta=1e-4, dim=128))
        assert got == pytest.approx(math.log2(math.log(1e4) / 1.28), rel=1e-9)
        assert got == pytest.approx(2.847, abs=5e-4)

    def test_violated_inequalities_are_named(self):
        with pytest.raises(ValueError, match="dim >= ln"):
            optimal_bitwidth_reference(TheoryParams(eps=0.1, delta=1e-4, dim=2))
        with pytest.raises(ValueError, match="1/eps"):
            optimal_bitwidth_reference(TheoryParams(eps=0.9, delta=0.9, dim=4096))


class TestRecallExperiment:
    def test_exact_scorer_is_perfect_and_curves_monotone(self, cache_dir):
        res = run_recall_experiment(["exact", "rabitq-prod", "tq-mse"], bits=2,
                                    dim=16, n_base=400, n_queries=30,
                                    k_values=[1, 2, 4, 8], runs=2, base_seed=0,
                                    cache_dir=cache_dir, threads=2)
        assert all(v == 1.0 for v in res["exact"].recall)
        for method, r in res.items():
            assert np.all(np.diff(r.per_run, axis=1) >= 0), method

    def test_thread_count_does_not_change_results(self, cache_dir):
        kwargs = dict(bits=2, dim=16, n_base=300, n_queries=25,
                      k_values=[1, 4], runs=2, base_seed=3, cache_dir=cache_dir)
        a = run_recall_experiment(["rabitq-prod", "tq-prod"], threads=1, **kwargs)
        b = run_recall_experiment(["rabitq-prod", "tq-prod"], threads=4, **kwargs)
        for method in a:
            assert np.array_equal(a[method].per_run, b[method].per_run)

    def test_user_supplied_base_rows_are_normalized(self, cache_dir):
        rng = np.random.default_rng(9)
        base = 5.0 * rng.standard_normal((200, 12))
        queries = rng.standard_normal((10, 12))
        res = run_recall_experiment(["exact", "tq-mse"], bits=2, dim=12,
                                    n_base=0, n_queries=0, k_values=[1, 4],
                                    runs=1, base_seed=0, cache_dir=cache_dir,
                                    base=base, queries=queries)
        assert all(v == 1.0 for v in res["exact"].recall)
        assert res["tq-mse"].recall[-1] >= res["tq-mse"].recall[0]

    def test_run_count_validated(self):
        with pytest.raises(ValueError):
            run_recall_experiment(["exact"], bits=2, dim=4, n_base=10,
                                  n_queries=2, k_values=[1], runs=0)


class TestBench:
    def test_rotation_time_is_included(self):
        data = np.random.default_rng(0).standard_normal((2000, 64))
        pipe = make_pipeline("rabitq-prod", 2, 64, rotation_seed=1,
                             strategy=ExpectedFactor(samples=128))
        timing = bench_quantize(data, pipe, repeats=3)
        assert timing.repeats == 3
        assert timing.median_seconds == pytest.approx(
            float(np.median(timing.seconds)), rel=1e-12)
        assert timing.min_seconds == min(timing.seconds)
        for total, quant in zip(timing.seconds, timing.quantize_seconds):
            assert total > quant  # the rotation-excluded timer is strictly smaller
        assert timing.hardware

    def test_bad_repeats(self):
        pipe = make_pipeline("tq-mse", 2, 8)
        with pytest.raises(ValueError):
            bench_quantize(np.ones((4, 8)), pipe, repeats=0)

    def test_more_rows_is_not_faster(self):
        small = np.random.default_rng(1).standard_normal((1500, 64))
        big = np.random.default_rng(2).standard_normal((6000, 64))
        pipe = make_pipeline("rabitq-prod", 2, 64, strategy=ExpectedFactor(samples=128))
        t_small = bench_quantize(small, pipe, repeats=3)
        t_big = bench_quantize(big, pipe, repeats=3)
        assert t_big.median_seconds >= t_small.median_seconds
